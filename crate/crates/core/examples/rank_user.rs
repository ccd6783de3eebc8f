//! Trains a small model and lists the nearest posts for one user, marking
//! the ones from the user's hidden topic.

use postrank::data::{generate_synthetic, time_based_split};
use postrank::ranking::rank_for_user;
use postrank::trainer::fit_model;
use postrank::{Post, Rng, RunConfig};

fn main() -> postrank::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/synthetic.toml"))?;
    let s = generate_synthetic(&cfg.synth, &mut Rng::seed_from_u64(cfg.seed))?;
    let split = time_based_split(&s.dataset, cfg.eval.holdout_per_user)?;
    let (model, _) = fit_model(&split.train, &cfg)?;
    let user = &s.dataset.users[0];
    let topic = s.user_topics[0];
    let candidates: Vec<&Post> = split.test.posts.iter().collect();
    for r in rank_for_user(&model, user, &candidates, 10)? {
        let j = s.dataset.posts.iter().position(|p| p.post_id == r.post_id).expect("known post");
        let mark = if s.post_topics[j] == topic { "*" } else { " " };
        println!("{mark} {}  {:.4}", r.post_id, r.distance);
    }
    Ok(())
}

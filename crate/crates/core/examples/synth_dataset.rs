//! Generates a small synthetic dataset and prints a few records with their
//! hidden topics.

use postrank::data::{generate_synthetic, time_based_split, SynthConfig};
use postrank::Rng;

fn main() -> postrank::Result<()> {
    let cfg = SynthConfig { users: 10, posts: 60, interactions_per_user: 6, topics: 3, ..SynthConfig::default() };
    let s = generate_synthetic(&cfg, &mut Rng::seed_from_u64(7))?;
    let d = &s.dataset;
    println!("{} posts, {} users, {} interactions", d.posts.len(), d.users.len(), d.interactions.len());
    for (p, t) in d.posts.iter().zip(&s.post_topics).take(3) {
        println!("{} topic {t} image {}: {}", p.post_id, p.visual_features.is_some(), p.base_text);
    }
    let split = time_based_split(d, 2)?;
    println!("train {} / test {} interactions", split.train.interactions.len(), split.test.interactions.len());
    Ok(())
}

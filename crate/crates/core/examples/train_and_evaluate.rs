//! Trains on the bundled synthetic benchmark and compares against the random
//! baseline.

use postrank::data::{generate_synthetic, time_based_split};
use postrank::trainer::fit_and_evaluate;
use postrank::{RankReport, Rng, RunConfig};

fn main() -> postrank::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/synthetic.toml"))?;
    let d = generate_synthetic(&cfg.synth, &mut Rng::seed_from_u64(cfg.seed))?.dataset;
    let split = time_based_split(&d, cfg.eval.holdout_per_user)?;
    let (_, log, report) = fit_and_evaluate(&split.train, &split.test, &cfg)?;
    let l = log.losses();
    println!("{} steps, loss {:.4} → {:.4}", l.len(), l[0], l[l.len() - 1]);
    print!("{}", RankReport::table(&[("trained", &report)]));
    println!("random baseline P@K {:.4}", report.random_baseline);
    Ok(())
}

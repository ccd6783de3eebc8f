//! Validates a grid of λ values on a holdout of the training split.

use postrank::data::{generate_synthetic, time_based_split};
use postrank::trainer::{lambda_sweep, sweep_table};
use postrank::{Rng, RunConfig};

fn main() -> postrank::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("../configs/synthetic.toml"))?;
    cfg.train.epochs = 40;
    let d = generate_synthetic(&cfg.synth, &mut Rng::seed_from_u64(cfg.seed))?.dataset;
    let train = time_based_split(&d, cfg.eval.holdout_per_user)?.train;
    let rows = lambda_sweep(&train, cfg.eval.val_fraction, &[0.0, 0.3, 1.0], &cfg)?;
    print!("{}", sweep_table(&rows));
    Ok(())
}

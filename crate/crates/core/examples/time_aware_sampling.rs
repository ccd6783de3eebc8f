//! Shows how often each candidate is drawn as a negative depending on how far
//! its creation time is from the positive interaction.

use postrank::sampling::{draw_time_aware, SamplerConfig};
use postrank::Rng;

fn main() -> postrank::Result<()> {
    let cfg = SamplerConfig { window_secs: 3600, negatives_per_positive: 1, ..SamplerConfig::default() };
    let offsets = [0, 900, 1800, 2700, 3600, 7200];
    let times: Vec<i64> = offsets.iter().map(|o| 10_000 + o).collect();
    let mut counts = [0usize; 6];
    let mut rng = Rng::seed_from_u64(3);
    let n = 50_000;
    for _ in 0..n {
        counts[draw_time_aware(10_000, &times, &cfg, &mut rng)?[0]] += 1;
    }
    for (o, c) in offsets.iter().zip(counts) {
        println!("offset {o:>5}s  picked {:.3}", c as f64 / n as f64);
    }
    Ok(())
}

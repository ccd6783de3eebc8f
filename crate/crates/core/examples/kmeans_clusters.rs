//! Clusters three noisy blobs and prints the inertia after every Lloyd step.

use postrank::encoding::fit_kmeans;
use postrank::Rng;

fn main() -> postrank::Result<()> {
    let mut rng = Rng::seed_from_u64(1);
    let centers = [[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]];
    let pts: Vec<Vec<f64>> = (0..90).map(|i| centers[i % 3].iter().map(|c| c + rng.normal()).collect()).collect();
    let c = fit_kmeans(&pts, 3, &mut rng, 100)?;
    for (step, inertia) in c.inertia_history.iter().enumerate() {
        println!("step {step:>2}  inertia {inertia:.3}");
    }
    for k in 0..c.k() {
        println!("centroid {k}: ({:.2}, {:.2})", c.centroid(k)[0], c.centroid(k)[1]);
    }
    Ok(())
}

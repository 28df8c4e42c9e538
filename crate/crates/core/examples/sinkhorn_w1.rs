//! Compares two Gaussian clouds with the debiased Sinkhorn divergence at
//! several blurs and with the exact W₁ distance.

use popmech::divergence::{estimate_blur, exact_w1, sinkhorn_divergence_arrays, DivergenceConfig};
use popmech_autodiff::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> popmech::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400;
    let mut gaussian = |shift: f64| {
        let data = (0..2 * n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + if i % 2 == 0 { shift } else { 0.0 }
            })
            .collect();
        Array::new(vec![n, 2], data).unwrap()
    };
    let a = gaussian(0.0);
    let b = gaussian(1.0);

    let auto = estimate_blur(&a)?;
    println!("automatic blur: {auto:.4}");
    for blur in [auto, 0.1, 0.5, 1.0] {
        let cfg = DivergenceConfig {
            max_iters: 5000,
            ..DivergenceConfig::default()
        }
        .with_blur(blur);
        let (s, report) = sinkhorn_divergence_arrays(&a, &b, &cfg)?;
        println!(
            "blur {blur:.3}: S = {s:.5} ({} iterations, converged {})",
            report.iterations, report.converged
        );
    }
    let w = exact_w1(&a, &b)?;
    println!("exact W₁ = {:.5} (exact: {}); the mean shift is 1.0", w.value, w.exact);
    Ok(())
}

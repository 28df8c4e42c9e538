//! Builds a learned population energy, checks that it ignores particle order,
//! and checks the analytic energies against their closed-form first variations.

use popmech::energy::{
    functional_derivative_check, init_params, AnalyticEnergy, Architecture, EnergyConfig, EnergyModel,
};
use popmech_autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> popmech::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 32;
    let x = Array::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let arch = Architecture::Attention(EnergyConfig {
        dim: 2,
        ..EnergyConfig::default()
    });
    let params = init_params(&arch, 0)?;
    println!("attention energy: {} parameters", params.num_scalars());
    let model = EnergyModel::Learned(params);

    let mut order: Vec<usize> = (0..n).collect();
    order.reverse();
    let shuffled = x.select_rows(&order);
    let (e, e_perm) = (model.energy(&x, None)?, model.energy(&shuffled, None)?);
    println!("Ψ(X) = {e:.12}, Ψ(reversed X) = {e_perm:.12}");

    let f = model.force(&x, None)?;
    let f_perm = model.force(&shuffled, None)?;
    let worst = (0..n)
        .flat_map(|i| (0..2).map(move |k| (i, k)))
        .map(|(i, k)| (f.data()[2 * i + k] - f_perm.data()[2 * (n - 1 - i) + k]).abs())
        .fold(0.0, f64::max);
    println!("forces follow their particles: max mismatch {worst:.2e}");

    for energy in [
        AnalyticEnergy::Harmonic { stiffness: vec![1.0, 4.0] },
        AnalyticEnergy::GaussianPair { amplitude: 0.5, width: 0.7 },
    ] {
        let check = functional_derivative_check(&energy, &x)?;
        println!("{energy:?}: first-variation rel err {:.2e}", check.max_rel_err);
    }
    Ok(())
}

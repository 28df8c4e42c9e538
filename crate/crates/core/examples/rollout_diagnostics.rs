//! Rolls a cloud forward in a harmonic well with and without friction and
//! prints kinetic, potential and total energy along the way.

use popmech::energy::{AnalyticEnergy, EnergyModel};
use popmech::integrator::{diagnostics, rollout_model, IntegratorConfig, MechState, Scheme};
use popmech_autodiff::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> popmech::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100;
    let mut cloud = || Array::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let state0 = MechState {
        x: cloud(),
        v: cloud(),
        t: 0.0,
    };
    let model = EnergyModel::Analytic(AnalyticEnergy::harmonic(2.0 * std::f64::consts::PI, 2));
    let cfg = IntegratorConfig {
        scheme: Scheme::DampedVelocityVerlet,
        substeps: 50,
    };
    let boundaries: Vec<f64> = (1..=24).map(|i| 0.15 * i as f64).collect();

    for gamma in [0.0, 1.0] {
        let traj = rollout_model(&model, gamma, &cfg, state0.clone(), &boundaries)?;
        let d = diagnostics(&traj, Some(&model))?;
        println!("γ = {gamma}: max relative drift of H {:.2e}", d.max_rel_drift);
        for i in (0..d.times.len()).step_by(3) {
            println!(
                "  t = {:.2}  kinetic {:.4}  potential {:.4}  total {:.4}",
                d.times[i], d.kinetic[i], d.potential[i], d.total[i]
            );
        }
    }
    Ok(())
}

//! Simulates a quadratic-potential SDE and a Boids flock and writes both as
//! snapshot bundles.
//!
//! ```text
//! cargo run --release --example gen_data -- /tmp/popmech-data
//! ```

use std::path::PathBuf;

use popmech::datagen::{gen_boids, gen_sde, save_dataset, BoidsSpec, Potential, SdeSpec};

fn main() -> popmech::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "popmech-data".into()));

    let spec = SdeSpec {
        potential: Potential::Quadratic,
        n: 500,
        ..SdeSpec::default()
    };
    let sde = gen_sde(&spec)?;
    for (split, ds) in [("train", &sde.train), ("test", &sde.test)] {
        save_dataset(&root.join("sde").join(split), ds, None, None)?;
    }
    let spread = |x: &popmech_autodiff::Array| x.data().iter().map(|v| v * v).sum::<f64>() / x.rows() as f64;
    println!("sde: {} + {} snapshots of {} particles", sde.train.len(), sde.test.len(), spec.n);
    for (t, x) in sde.train.times.iter().zip(&sde.train.snapshots).step_by(3) {
        println!("  t = {t:.2}  mean ‖x‖² = {:.4}", spread(x));
    }

    let boids = gen_boids(&BoidsSpec {
        n: 200,
        frames_train: 30,
        frames_test: 30,
        ..BoidsSpec::default()
    })?;
    for (split, ds) in [("train", &boids.train), ("test", &boids.test)] {
        save_dataset(&root.join("boids").join(split), ds, None, None)?;
    }
    println!("boids: {} + {} frames, velocities included", boids.train.len(), boids.test.len());
    println!("written under {}", root.display());
    Ok(())
}

//! Fits a damped population energy to a quadratic-potential SDE and reports
//! forecast W₁ against the frozen baseline.
//!
//! ```text
//! cargo run --release --example train_quadratic -- 300
//! ```

use popmech::datagen::{gen_sde, SdeSpec};
use popmech::divergence::{DivergenceConfig, GradMode};
use popmech::energy::{Architecture, EnergyConfig};
use popmech::eval::{forecast_eval, frozen_baseline, Mechanics};
use popmech::integrator::IntegratorConfig;
use popmech::trainer::{TrainConfig, Trainer};
use popmech_autodiff::Array;

fn main() -> popmech::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = SdeSpec {
        n: 200,
        ..SdeSpec::default()
    };
    let data = gen_sde(&spec)?;
    let v0 = Array::zeros(vec![spec.n, 2]);
    let arch = Architecture::Attention(EnergyConfig {
        dim: 2,
        hidden: 16,
        blocks: 2,
        heads: 2,
        ff_inner: 32,
        time_features: 0,
        ..EnergyConfig::default()
    });
    let cfg = TrainConfig {
        epochs,
        lr_theta: 3e-3,
        lr_gamma: 0.05,
        minibatch: Some(64),
        ema_decay: 0.99,
        loss: DivergenceConfig {
            max_iters: 25,
            grad: GradMode::Envelope,
            ..DivergenceConfig::default()
        },
        ..TrainConfig::default()
    };
    let integ = IntegratorConfig::default();
    let mut trainer = Trainer::new(&data.train, v0.clone(), &arch, cfg, integ.clone())?;
    while trainer.state.epoch < epochs {
        let e = trainer.epoch()?;
        if e.epoch % 50 == 0 {
            println!("epoch {:>5}  K {}  loss {:.5}  γ {:.3}", e.epoch, e.k, e.loss, e.gamma);
        }
    }

    let learned = Mechanics {
        model: trainer.state.ema_model(),
        gamma: trainer.state.gamma,
    };
    for (name, mech) in [("learned", &learned), ("frozen", &frozen_baseline())] {
        let r = forecast_eval(mech, &data.train, &data.test, &v0, &integ)?;
        println!(
            "{name:>7}: train W₁ {:.4}  forecast W₁ {:.4}",
            r.train_mean.unwrap_or(f64::NAN),
            r.test_mean.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

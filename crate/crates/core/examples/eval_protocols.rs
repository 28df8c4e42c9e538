//! Scores the Boids ground truth against the frozen baseline under the
//! forecast and interpolation protocols and writes the reports.

use std::path::PathBuf;

use popmech::datagen::{estimate_v0, gen_boids, BoidsSpec, V0Mode};
use popmech::eval::{forecast_eval, frozen_baseline, interpolate_eval, report_emit, Format, VMode};
use popmech::integrator::IntegratorConfig;

fn main() -> popmech::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "popmech-eval".into()));
    let data = gen_boids(&BoidsSpec {
        n: 200,
        frames_train: 10,
        frames_test: 10,
        ..BoidsSpec::default()
    })?;
    let v0 = estimate_v0(&data.train, V0Mode::Provided)?;
    let integ = IntegratorConfig::default();
    let mech = frozen_baseline();

    let forecast = forecast_eval(&mech, &data.train, &data.test, &v0, &integ)?;
    println!(
        "forecast: train W₁ {:.4}, test W₁ {:.4}",
        forecast.train_mean.unwrap_or(f64::NAN),
        forecast.test_mean.unwrap_or(f64::NAN)
    );
    for e in forecast.entries.iter().step_by(4) {
        println!("  {} {:?} W₁ {:.4}", e.label, e.split, e.w1);
    }
    report_emit(&forecast, &out, &[Format::Csv, Format::Json, Format::Svg])?;

    for h in [3, 6] {
        let r = interpolate_eval(&mech, &data.train, h, VMode::Provided, None, &integ)?;
        let e = &r.entries[0];
        println!("interpolate {}: W₁ {:.4}", e.label, e.w1);
        report_emit(&r, &out, &[Format::Csv])?;
    }
    println!("reports in {}", out.display());
    Ok(())
}

use popmech::datagen::SnapshotDataset;
use popmech::energy::{AnalyticEnergy, EnergyModel};
use popmech::eval::{
    aggregate, forecast_eval, frozen_baseline, interpolate_eval, kde_resample, mean_se, read_report_csv, report_emit,
    scatter_svg, EvalReport, Format, Mechanics, Protocol, Split, VMode,
};
use popmech::integrator::{rollout_model, IntegratorConfig, MechState};
use popmech_autodiff::Array;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64, spread: f64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
}

fn harmonic() -> Mechanics {
    Mechanics {
        model: EnergyModel::Analytic(AnalyticEnergy::harmonic(3.0, 2)),
        gamma: 0.4,
    }
}

fn times(k: usize, dt: f64) -> Vec<f64> {
    (0..k).map(|i| i as f64 * dt).collect()
}

/// The model's own trajectory, with velocities, split after `split` frames.
fn self_generated(mech: &Mechanics, n: usize, frames: usize, split: usize) -> (SnapshotDataset, SnapshotDataset, Array) {
    let x0 = cloud(n, 1, 1.0);
    let v0 = cloud(n, 2, 0.5);
    let t = times(frames, 0.1);
    let traj = rollout_model(&mech.model, mech.gamma, &IntegratorConfig::default(), MechState { x: x0, v: v0.clone(), t: 0.0 }, &t[1..])
        .unwrap();
    let all = SnapshotDataset::from_trajectory(&traj).unwrap();
    (all.slice(0..split), all.slice(split..frames), v0)
}

fn translating(n: usize, frames: usize, z: [f64; 2]) -> SnapshotDataset {
    let x0 = cloud(n, 3, 1.0);
    let t = times(frames, 0.5);
    let snaps = t
        .iter()
        .map(|&s| x0.zip_map(&Array::new(vec![n, 2], [z[0] * s, z[1] * s].repeat(n)).unwrap(), |a, b| a + b).unwrap())
        .collect();
    SnapshotDataset::new(t, snaps, None, true).unwrap()
}

#[test]
fn ground_truth_mechanics_forecast_perfectly() {
    let mech = harmonic();
    let (train, test, v0) = self_generated(&mech, 12, 8, 5);
    let r = forecast_eval(&mech, &train, &test, &v0, &IntegratorConfig::default()).unwrap();
    assert_eq!(r.entries.len(), 7);
    assert!(r.entries.iter().all(|e| e.w1 <= 1e-12 && e.exact));
    assert_eq!(r.entries.iter().filter(|e| e.split == Split::Test).count(), 3);
    assert_eq!(r.protocol, Protocol::Forecast);
}

#[test]
fn frozen_population_scores_the_translation() {
    let z = [0.6, -0.8];
    let ds = translating(10, 5, z);
    let r = forecast_eval(&frozen_baseline(), &ds.slice(0..3), &ds.slice(3..5), &Array::zeros(vec![10, 2]), &IntegratorConfig::default())
        .unwrap();
    for e in &r.entries {
        assert!((e.w1 - e.time).abs() <= 1e-12, "{} at {}", e.w1, e.time);
    }
}

#[test]
fn empty_test_split_is_a_training_fit() {
    let ds = translating(8, 4, [1.0, 0.0]);
    let empty = SnapshotDataset { times: vec![], snapshots: vec![], velocities: None, ..ds.clone() };
    let r = forecast_eval(&frozen_baseline(), &ds, &empty, &Array::zeros(vec![8, 2]), &IntegratorConfig::default()).unwrap();
    assert!(r.test_mean.is_none());
    let mean = r.entries.iter().map(|e| e.w1).sum::<f64>() / r.entries.len() as f64;
    assert!((r.train_mean.unwrap() - mean).abs() <= 1e-12);
}

#[test]
fn test_times_must_follow_train_times() {
    let ds = translating(5, 4, [1.0, 0.0]);
    let v0 = Array::zeros(vec![5, 2]);
    assert!(forecast_eval(&frozen_baseline(), &ds.slice(2..4), &ds.slice(0..2), &v0, &IntegratorConfig::default()).is_err());
}

#[test]
fn interpolation_on_own_data_with_provided_velocities() {
    let mech = harmonic();
    let (train, _, _) = self_generated(&mech, 10, 6, 6);
    for h in 1..5 {
        let r = interpolate_eval(&mech, &train, h, VMode::Provided, None, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].split, Split::Heldout);
        assert!(r.entries[0].w1 <= 1e-12);
    }
}

#[test]
fn zero_model_at_rest_predicts_the_previous_snapshot() {
    let snaps: Vec<Array> = (0..4).map(|i| cloud(9, 10 + i, 1.0)).collect();
    let ds = SnapshotDataset::new(times(4, 1.0), snaps.clone(), None, false).unwrap();
    let mech = Mechanics { model: EnergyModel::Analytic(AnalyticEnergy::Zero), gamma: 0.0 };
    let r = interpolate_eval(&mech, &ds, 2, VMode::Zero, None, &IntegratorConfig::default()).unwrap();
    let direct = popmech::divergence::exact_w1(&snaps[1], &snaps[2]).unwrap().value;
    assert_eq!(r.entries[0].w1, direct);
}

#[test]
fn carried_velocities_follow_the_assignment() {
    // Well separated particles in straight-line motion; the observed rows at
    // t₁ are shuffled so copying velocities by index would fail.
    let n = 6;
    let x0 = Array::new(vec![n, 2], (0..n).flat_map(|i| [3.0 * i as f64, (i % 2) as f64]).collect()).unwrap();
    let u = Array::new(vec![n, 2], (0..n).flat_map(|i| [0.1 * i as f64, -0.2]).collect()).unwrap();
    let t = times(5, 0.5);
    let at = |s: f64| x0.zip_map(&u, |a, b| a + s * b).unwrap();
    let perm = [4, 2, 0, 5, 1, 3];
    let snaps = vec![at(t[0]), at(t[1]), at(t[2]).permute_rows(&perm), at(t[3]), at(t[4])];
    let ds = SnapshotDataset::new(t, snaps, None, false).unwrap();
    let mech = Mechanics { model: EnergyModel::Analytic(AnalyticEnergy::Zero), gamma: 0.0 };
    let r = interpolate_eval(&mech, &ds, 3, VMode::Carried, Some(&u), &IntegratorConfig::default()).unwrap();
    assert!(r.entries[0].w1 <= 1e-12, "{}", r.entries[0].w1);
    let zero = interpolate_eval(&mech, &ds, 3, VMode::Zero, None, &IntegratorConfig::default()).unwrap();
    assert!(zero.entries[0].w1 > 0.05);
}

#[test]
fn interpolation_ignores_non_adjacent_snapshots() {
    let mech = harmonic();
    let (ds, _, v0) = self_generated(&mech, 8, 6, 6);
    let base = interpolate_eval(&mech, &ds, 2, VMode::Carried, Some(&v0), &IntegratorConfig::default()).unwrap();
    let mut changed = ds.clone();
    changed.snapshots[4] = cloud(8, 99, 5.0);
    changed.snapshots[5] = changed.snapshots[5].permute_rows(&[7, 6, 5, 4, 3, 2, 1, 0]);
    let again = interpolate_eval(&mech, &changed, 2, VMode::Carried, Some(&v0), &IntegratorConfig::default()).unwrap();
    assert_eq!(base.entries, again.entries);
}

#[test]
fn interpolation_preconditions() {
    let ds = translating(4, 4, [1.0, 0.0]);
    let mech = frozen_baseline();
    let integ = IntegratorConfig::default();
    assert!(interpolate_eval(&mech, &ds, 0, VMode::Zero, None, &integ).is_err());
    assert!(interpolate_eval(&mech, &ds, 3, VMode::Zero, None, &integ).is_err());
    assert!(interpolate_eval(&mech, &ds, 1, VMode::Provided, None, &integ).is_err());
    assert!(interpolate_eval(&mech, &ds, 1, VMode::Carried, None, &integ).is_err());
}

#[test]
fn csv_round_trip_and_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let ds = translating(6, 5, [0.3, 0.4]);
    let r = forecast_eval(&frozen_baseline(), &ds.slice(0..3), &ds.slice(3..5), &Array::zeros(vec![6, 2]), &IntegratorConfig::default())
        .unwrap();
    let files = report_emit(&r, dir.path(), &[Format::Csv, Format::Json, Format::Svg]).unwrap();
    assert_eq!(files.len(), 2 + r.entries.len());
    let back = read_report_csv(&dir.path().join("forecast_all.csv")).unwrap();
    assert_eq!(back, r.entries);
    let rebuilt = EvalReport::new(Protocol::Forecast, None, back, vec![]);
    assert_eq!(rebuilt.train_mean, r.train_mean);
    assert_eq!(rebuilt.test_mean, r.test_mean);
    assert!(dir.path().join(format!("forecast_{}.svg", r.entries[0].label)).exists());

    let empty = EvalReport::new(Protocol::Interpolate, Some(VMode::Zero), vec![], vec![]);
    report_emit(&empty, dir.path(), &[Format::Csv]).unwrap();
    let text = std::fs::read_to_string(dir.path().join("interpolate_all.csv")).unwrap();
    assert_eq!(text, "protocol,label,time,split,w1,exact\n");
}

#[test]
fn svg_has_one_marker_per_particle() {
    let svg = scatter_svg(&cloud(7, 1, 1.0), &cloud(5, 2, 1.0));
    assert_eq!(svg.matches("class=\"pred\"").count(), 7);
    assert_eq!(svg.matches("class=\"obs\"").count(), 5);
    let three = Array::new(vec![3, 3], vec![0.0; 9]).unwrap();
    assert_eq!(scatter_svg(&three, &three).matches("<circle").count(), 6);
}

#[test]
fn aggregation_reports_both_conventions() {
    let mk = |w: &[f64]| {
        let entries = w
            .iter()
            .enumerate()
            .map(|(i, &w1)| popmech::eval::TimeEntry {
                label: format!("t{i}"),
                time: i as f64,
                split: Split::Train,
                w1,
                exact: true,
            })
            .collect();
        EvalReport::new(Protocol::Forecast, None, entries, vec![])
    };
    let agg = aggregate(&[mk(&[1.0, 3.0]), mk(&[5.0])]);
    assert_eq!(agg.seeds, 2);
    assert_eq!(agg.train.mean_over_times_then_seeds.unwrap().mean, 3.5);
    assert_eq!(agg.train.pooled.unwrap().mean, 3.0);
    assert!(agg.test.pooled.is_none());
    let ms = mean_se(&[1.0, 2.0, 3.0]).unwrap();
    assert!((ms.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn kde_resample_is_seeded() {
    let x = cloud(50, 4, 1.0);
    let v = cloud(50, 5, 0.2);
    let (a, av) = kde_resample(&x, &v, 200, 1).unwrap();
    let (b, _) = kde_resample(&x, &v, 200, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[200, 2]);
    assert_eq!(av.shape(), &[200, 2]);
    let mean = |c: &Array, k: usize| (0..c.rows()).map(|r| c.row(r)[k]).sum::<f64>() / c.rows() as f64;
    assert!((mean(&a, 0) - mean(&x, 0)).abs() < 0.2);
}

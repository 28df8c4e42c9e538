//! Forecasting and leave-one-out interpolation scored with `W₁`.

use std::fs;
use std::path::{Path, PathBuf};

use popmech_autodiff::Array;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotDataset;
use crate::divergence::{assignment, exact_w1};
use crate::energy::{AnalyticEnergy, EnergyModel};
use crate::error::{Error, Result};
use crate::integrator::{rollout_model, IntegratorConfig, MechState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Forecast,
    Interpolate,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Forecast => "forecast",
            Protocol::Interpolate => "interpolate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Heldout,
}

/// Velocities used to restart from an observed snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VMode {
    /// Stored velocities at the restart time.
    Provided,
    Zero,
    /// Roll the model from `t₀` and hand the rolled velocities to the
    /// observed particles through an optimal assignment.
    #[default]
    Carried,
}

/// Learned or analytic energy together with its friction.
#[derive(Clone, Debug)]
pub struct Mechanics {
    pub model: EnergyModel,
    pub gamma: f64,
}

/// Zero energy with overwhelming friction: particles stay where they start.
pub fn frozen_baseline() -> Mechanics {
    Mechanics {
        model: EnergyModel::Analytic(AnalyticEnergy::Zero),
        gamma: 1e6,
    }
}

pub fn time_label(t: f64) -> String {
    format!("t{t:.4}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEntry {
    pub label: String,
    pub time: f64,
    pub split: Split,
    pub w1: f64,
    /// False when the entropic fallback was used.
    pub exact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    pub approximate_w1: bool,
    pub divergence_nonconvergence: bool,
}

/// Predicted and observed clouds for one scored time.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPair {
    pub label: String,
    pub predicted: Array,
    pub observed: Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mode: Option<VMode>,
    pub entries: Vec<TimeEntry>,
    pub train_mean: Option<f64>,
    pub test_mean: Option<f64>,
    pub flags: Flags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip)]
    pub snapshots: Vec<SnapshotPair>,
}

fn split_mean(entries: &[TimeEntry], split: Split) -> Option<f64> {
    let vals: Vec<f64> = entries.iter().filter(|e| e.split == split).map(|e| e.w1).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl EvalReport {
    pub fn new(protocol: Protocol, v_mode: Option<VMode>, entries: Vec<TimeEntry>, snapshots: Vec<SnapshotPair>) -> Self {
        let flags = Flags {
            approximate_w1: entries.iter().any(|e| !e.exact),
            divergence_nonconvergence: false,
        };
        Self {
            protocol,
            v_mode,
            train_mean: split_mean(&entries, Split::Train),
            test_mean: split_mean(&entries, Split::Test),
            entries,
            flags,
            config_hash: None,
            snapshots,
        }
    }

    /// Mean of every entry regardless of split.
    pub fn mean(&self) -> Option<f64> {
        (!self.entries.is_empty()).then(|| self.entries.iter().map(|e| e.w1).sum::<f64>() / self.entries.len() as f64)
    }
}

fn state0(ds: &SnapshotDataset, index: usize, v: Array) -> Result<MechState<Array>> {
    let x = ds.snapshots[index].clone();
    if v.shape() != x.shape() {
        return Err(Error::data("eval", format!("velocity shape {:?} does not match snapshot {:?}", v.shape(), x.shape())));
    }
    Ok(MechState { x, v, t: ds.times[index] })
}

fn check_dims(mech: &Mechanics, ds: &SnapshotDataset) -> Result<()> {
    if let Some(d) = mech.model.dim() {
        if d != ds.dim {
            return Err(Error::data("eval", format!("model dim {d} but dataset dim {}", ds.dim)));
        }
    }
    if !mech.gamma.is_finite() || mech.gamma < 0.0 {
        return Err(Error::data("eval", "gamma must be finite and ≥ 0"));
    }
    Ok(())
}

/// Rolls once from `(X_{t₀}, v₀)` through every train and test time and
/// scores each predicted snapshot after the first.
pub fn forecast_eval(
    mech: &Mechanics,
    train: &SnapshotDataset,
    test: &SnapshotDataset,
    v0: &Array,
    integ: &IntegratorConfig,
) -> Result<EvalReport> {
    if train.is_empty() {
        return Err(Error::data("forecast_eval", "empty training set"));
    }
    forecast_from(mech, state0(train, 0, v0.clone())?, train, test, integ)
}

/// Forecast from an arbitrary initial cloud at `t₀`, such as a resampled one.
pub fn forecast_from(
    mech: &Mechanics,
    start: MechState<Array>,
    train: &SnapshotDataset,
    test: &SnapshotDataset,
    integ: &IntegratorConfig,
) -> Result<EvalReport> {
    check_dims(mech, train)?;
    if train.is_empty() {
        return Err(Error::data("forecast_eval", "empty training set"));
    }
    if start.x.cols() != train.dim || start.v.shape() != start.x.shape() {
        return Err(Error::data("forecast_eval", "initial state does not match the data dimension"));
    }
    if let (Some(a), Some(b)) = (train.times.last(), test.times.first()) {
        if !(a < b) {
            return Err(Error::data("forecast_eval", "test times must follow the train times"));
        }
    }
    if !test.is_empty() && test.dim != train.dim {
        return Err(Error::data("forecast_eval", "train and test dims differ"));
    }
    let observed: Vec<(&Array, f64, Split)> = train
        .snapshots
        .iter()
        .zip(&train.times)
        .map(|(x, &t)| (x, t, Split::Train))
        .chain(test.snapshots.iter().zip(&test.times).map(|(x, &t)| (x, t, Split::Test)))
        .collect();
    let boundaries: Vec<f64> = observed[1..].iter().map(|o| o.1).collect();
    let traj = rollout_model(&mech.model, mech.gamma, integ, start, &boundaries).map_err(
        |e| match e {
            Error::NonFinite { what, location } => Error::non_finite(what, format!("forecast from {}: {location}", time_label(train.times[0]))),
            other => other,
        },
    )?;
    let mut entries = Vec::with_capacity(boundaries.len());
    let mut snaps = Vec::with_capacity(boundaries.len());
    for (state, &(obs, t, split)) in traj.iter().zip(&observed).skip(1) {
        let w = exact_w1(&state.x, obs)?;
        let label = time_label(t);
        entries.push(TimeEntry {
            label: label.clone(),
            time: t,
            split,
            w1: w.value,
            exact: w.exact,
        });
        snaps.push(SnapshotPair {
            label,
            predicted: state.x.clone(),
            observed: obs.clone(),
        });
    }
    Ok(EvalReport::new(Protocol::Forecast, None, entries, snaps))
}

/// Restarts from the observed `X_{t_{h−1}}`, rolls one interval and scores
/// the prediction against the held-out `X_{t_h}`.
///
/// `v0` is needed only in carried mode.
pub fn interpolate_eval(
    mech: &Mechanics,
    ds: &SnapshotDataset,
    h: usize,
    v_mode: VMode,
    v0: Option<&Array>,
    integ: &IntegratorConfig,
) -> Result<EvalReport> {
    check_dims(mech, ds)?;
    if h == 0 || h >= ds.intervals() {
        return Err(Error::data("interpolate_eval", format!("held-out index {h} is not an interior time, need 0 < h < {}", ds.intervals())));
    }
    let prev = &ds.snapshots[h - 1];
    let v = match v_mode {
        VMode::Zero => Array::zeros(prev.shape().to_vec()),
        VMode::Provided => ds
            .velocities
            .as_ref()
            .map(|vs| vs[h - 1].clone())
            .ok_or_else(|| Error::data("interpolate_eval", "v mode `provided` needs stored velocities"))?,
        VMode::Carried => {
            let v0 = v0.ok_or_else(|| Error::data("interpolate_eval", "v mode `carried` needs v0"))?;
            carried_velocity(mech, ds, h, v0, integ)?
        }
    };
    let traj = rollout_model(&mech.model, mech.gamma, integ, state0(ds, h - 1, v)?, &[ds.times[h]]).map_err(|e| match e {
        Error::NonFinite { what, location } => Error::non_finite(what, format!("interpolation into {}: {location}", time_label(ds.times[h]))),
        other => other,
    })?;
    let pred = &traj[1].x;
    let obs = &ds.snapshots[h];
    let w = exact_w1(pred, obs)?;
    let label = time_label(ds.times[h]);
    let entry = TimeEntry {
        label: label.clone(),
        time: ds.times[h],
        split: Split::Heldout,
        w1: w.value,
        exact: w.exact,
    };
    let pair = SnapshotPair {
        label,
        predicted: pred.clone(),
        observed: obs.clone(),
    };
    Ok(EvalReport::new(Protocol::Interpolate, Some(v_mode), vec![entry], vec![pair]))
}

/// Rolled velocities at `t_{h−1}` moved onto the observed particles by the
/// squared-distance optimal assignment between rolled and observed positions.
fn carried_velocity(mech: &Mechanics, ds: &SnapshotDataset, h: usize, v0: &Array, integ: &IntegratorConfig) -> Result<Array> {
    let boundaries = &ds.times[1..h];
    let traj = rollout_model(&mech.model, mech.gamma, integ, state0(ds, 0, v0.clone())?, boundaries)?;
    let rolled = traj.last().expect("rollout returns the initial state");
    let obs = &ds.snapshots[h - 1];
    if rolled.x.rows() != obs.rows() {
        return Err(Error::data(
            "interpolate_eval",
            format!("carried mode needs equal snapshot sizes, got {} and {}", rolled.x.rows(), obs.rows()),
        ));
    }
    let n = obs.rows();
    let mut cost = Array::zeros(vec![n, n]);
    for i in 0..n {
        let oi = obs.row(i);
        let row = cost.row_mut(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = oi.iter().zip(rolled.x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    let perm = assignment(&cost);
    Ok(rolled.v.select_rows(&perm))
}

/// `n` joint draws from a Gaussian kernel density fit of `(x, v)` with
/// Silverman's per-coordinate bandwidth.
pub fn kde_resample(x: &Array, v: &Array, n: usize, seed: u64) -> Result<(Array, Array)> {
    if x.shape() != v.shape() || x.rows() == 0 {
        return Err(Error::data("kde_resample", "need matching nonempty positions and velocities"));
    }
    let (m, d) = (x.rows(), x.cols());
    let joint = 2 * d;
    let factor = (4.0 / ((joint + 2) as f64 * m as f64)).powf(1.0 / (joint + 4) as f64);
    let bandwidth = |a: &Array, k: usize| {
        let mean = (0..m).map(|i| a.row(i)[k]).sum::<f64>() / m as f64;
        let var = (0..m).map(|i| (a.row(i)[k] - mean).powi(2)).sum::<f64>() / (m.max(2) - 1) as f64;
        var.sqrt() * factor
    };
    let bx: Vec<f64> = (0..d).map(|k| bandwidth(x, k)).collect();
    let bv: Vec<f64> = (0..d).map(|k| bandwidth(v, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n * d);
    let mut vs = Vec::with_capacity(n * d);
    for _ in 0..n {
        let i = rng.random_range(0..m);
        for k in 0..d {
            xs.push(x.row(i)[k] + bx[k] * rng.sample::<f64, _>(StandardNormal));
        }
        for k in 0..d {
            vs.push(v.row(i)[k] + bv[k] * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok((Array::new(vec![n, d], xs)?, Array::new(vec![n, d], vs)?))
}

/// Mean and standard error of a sample; the error is zero for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

pub fn mean_se(xs: &[f64]) -> Option<MeanSe> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanSe { mean, se, count: n })
}

/// Aggregates of one split over several seeds, computed two ways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAggregate {
    /// Per-seed mean over times, then mean ± SE over seeds.
    pub mean_over_times_then_seeds: Option<MeanSe>,
    /// Mean ± SE over every (seed, time) entry.
    pub pooled: Option<MeanSe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seeds: usize,
    pub train: SplitAggregate,
    pub test: SplitAggregate,
    pub heldout: SplitAggregate,
}

pub fn aggregate(reports: &[EvalReport]) -> SeedAggregate {
    let split = |s: Split| {
        let per_seed: Vec<f64> = reports.iter().filter_map(|r| split_mean(&r.entries, s)).collect();
        let pooled: Vec<f64> = reports.iter().flat_map(|r| r.entries.iter().filter(|e| e.split == s).map(|e| e.w1)).collect();
        SplitAggregate {
            mean_over_times_then_seeds: mean_se(&per_seed),
            pooled: mean_se(&pooled),
        }
    };
    SeedAggregate {
        seeds: reports.len(),
        train: split(Split::Train),
        test: split(Split::Test),
        heldout: split(Split::Heldout),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

/// Tag used in file names for a whole report rather than one time.
pub const ALL_TIMES: &str = "all";

const CSV_HEADER: [&str; 6] = ["protocol", "label", "time", "split", "w1", "exact"];

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
        Split::Heldout => "heldout",
    }
}

/// Writes the report under `dir` as `{protocol}_{time-label}.{ext}`: one
/// csv and one json for the whole report, one svg per scored time.
pub fn report_emit(report: &EvalReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let proto = report.protocol.name();
    let mut out = Vec::new();
    for f in formats {
        match f {
            Format::Csv => {
                let path = dir.join(format!("{proto}_{ALL_TIMES}.csv"));
                write_csv(report, &path)?;
                out.push(path);
            }
            Format::Json => {
                let path = dir.join(format!("{proto}_{ALL_TIMES}.json"));
                let json = serde_json::to_string_pretty(report).map_err(|e| Error::Numeric(e.to_string()))?;
                fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
                out.push(path);
            }
            Format::Svg => {
                for pair in &report.snapshots {
                    let path = dir.join(format!("{proto}_{}.svg", pair.label));
                    fs::write(&path, scatter_svg(&pair.predicted, &pair.observed)).map_err(|e| Error::io(&path, e))?;
                    out.push(path);
                }
            }
        }
    }
    Ok(out)
}

fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::data(path.display().to_string(), e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    w.write_record(CSV_HEADER).map_err(err)?;
    for e in &report.entries {
        w.write_record([
            report.protocol.name(),
            &e.label,
            &e.time.to_string(),
            split_name(e.split),
            &e.w1.to_string(),
            &e.exact.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Entries of a csv written by [`report_emit`].
pub fn read_report_csv(path: &Path) -> Result<Vec<TimeEntry>> {
    let ctx = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(&ctx, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(&ctx, e.to_string()))?;
        let bad = || Error::data(&ctx, format!("malformed row {:?}", rec));
        if rec.len() != CSV_HEADER.len() {
            return Err(bad());
        }
        let split = match &rec[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            "heldout" => Split::Heldout,
            _ => return Err(bad()),
        };
        out.push(TimeEntry {
            label: rec[1].to_string(),
            time: rec[2].parse().map_err(|_| bad())?,
            split,
            w1: rec[4].parse().map_err(|_| bad())?,
            exact: rec[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Overlay of two clouds on their first two coordinates: observed as grey
/// `obs` circles, predicted as red `pred` circles.
pub fn scatter_svg(predicted: &Array, observed: &Array) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 12.0;
    let coord = |a: &Array, i: usize, k: usize| if k < a.cols() { a.row(i)[k] } else { 0.0 };
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for a in [predicted, observed] {
        for i in 0..a.rows() {
            for k in 0..2 {
                let c = coord(a, i, k);
                if c.is_finite() {
                    lo[k] = lo[k].min(c);
                    hi[k] = hi[k].max(c);
                }
            }
        }
    }
    for k in 0..2 {
        if !lo[k].is_finite() {
            (lo[k], hi[k]) = (0.0, 0.0);
        }
    }
    let span = (0..2).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = if span > 0.0 && span.is_finite() { (SIZE - 2.0 * PAD) / span } else { 1.0 };
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (a, class, color) in [(observed, "obs", "#888888"), (predicted, "pred", "#d62728")] {
        for i in 0..a.rows() {
            let x = PAD + (coord(a, i, 0) - lo[0]) * scale;
            let y = SIZE - PAD - (coord(a, i, 1) - lo[1]) * scale;
            s.push_str(&format!(
                "<circle class=\"{class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n"
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

//! The `popmech` command line.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{ExperimentConfig, Weights};
use crate::datagen::{gen_boids, gen_sde, load_dataset, save_dataset, SnapshotDataset};
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, forecast_eval, forecast_from, frozen_baseline, interpolate_eval, kde_resample, report_emit, EvalReport,
    Mechanics, Protocol, ALL_TIMES,
};
use crate::integrator::{diagnostics, rollout_model, MechState};
use crate::trainer::{load_checkpoint, save_checkpoint, TrainState, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";

#[derive(Parser, Debug)]
#[command(name = "popmech", version, about = "Learn damped population mechanics from snapshots, then interpolate and forecast")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config in TOML; built-in defaults when omitted
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=100` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run these seeds independently, each in its own `seed_<s>` subdirectory
    #[arg(long, value_delimiter = ',', value_name = "A,B,..")]
    pub seeds: Vec<u64>,
    /// Output directory [default: `output_dir` from the config]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    /// Zero energy, overwhelming friction: the first snapshot never moves
    Frozen,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a gradient-flow SDE benchmark into `<out>/train` and `<out>/test`
    GenSde {
        #[command(flatten)]
        common: Common,
        /// bohachevsky | oakley-ohagan | quadratic | styblinski-tang | wavy-plateau [default: quadratic]
        #[arg(long)]
        potential: Option<String>,
        /// Particles per marginal [default: 1000]
        #[arg(long)]
        n: Option<usize>,
        /// Follow one population through time [default: true]
        #[arg(long)]
        paired: Option<bool>,
        /// Data seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate Boids flocking into `<out>/train` and `<out>/test`
    GenBoids {
        #[command(flatten)]
        common: Common,
        /// Agents [default: 1000]
        #[arg(long)]
        n: Option<usize>,
        /// Observed frames [default: 50]
        #[arg(long)]
        frames_train: Option<usize>,
        /// Forecast frames [default: 50]
        #[arg(long)]
        frames_test: Option<usize>,
        /// Data seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the energy and friction to `<data>/train`
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding `train/` (and optionally `test/`)
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Total epochs [default: 1000]
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/checkpoint.bin`, appending to the log
        #[arg(long)]
        resume: bool,
    },
    /// Simulate a checkpoint from the first snapshot through every observed time
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint file, or a training output directory
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Integrator steps between marginals [default: 5]
        #[arg(long)]
        substeps: Option<usize>,
        /// ema | live [default: ema]
        #[arg(long)]
        weights: Option<String>,
    },
    /// Score a checkpoint (or a baseline) with W₁
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint file, or a training output directory
        #[arg(long, value_name = "PATH", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score a reference model instead of a checkpoint
        #[arg(long, value_enum, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
        /// forecast | interpolate (repeatable) [default: forecast]
        #[arg(long)]
        protocol: Vec<String>,
        /// Restart velocity for interpolation: provided | zero | carried [default: carried]
        #[arg(long)]
        v_mode: Option<String>,
        /// Held-out index for interpolation (repeatable) [default: every interior time]
        #[arg(long)]
        heldout: Vec<usize>,
        /// Integrator steps between marginals [default: 5]
        #[arg(long)]
        substeps: Option<usize>,
        /// ema | live [default: ema]
        #[arg(long)]
        weights: Option<String>,
        /// Output formats [default: csv,json,svg]
        #[arg(long, value_delimiter = ',')]
        formats: Vec<String>,
    },
    /// Aggregate eval reports over seeds
    Report {
        /// Eval output directories, or parents of `seed_<s>` directories
        #[arg(long, required = true, num_args = 1.., value_name = "DIR")]
        runs: Vec<PathBuf>,
        /// Where to write `aggregate.json` [default: the first run directory]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn push<T: ToString>(o: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push(format!("{key}={}", v.to_string()));
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSde {
            mut common,
            potential,
            n,
            paired,
            seed,
        } => {
            push(&mut common.overrides, "sde.potential", potential.as_deref().map(quoted));
            push(&mut common.overrides, "sde.n", n);
            push(&mut common.overrides, "sde.paired", paired);
            push(&mut common.overrides, "sde.seed", seed);
            fan_out(&common, |cfg, out| cmd_gen_sde(cfg, out))
        }
        Command::GenBoids {
            mut common,
            n,
            frames_train,
            frames_test,
            seed,
        } => {
            push(&mut common.overrides, "boids.n", n);
            push(&mut common.overrides, "boids.frames_train", frames_train);
            push(&mut common.overrides, "boids.frames_test", frames_test);
            push(&mut common.overrides, "boids.seed", seed);
            fan_out(&common, |cfg, out| cmd_gen_boids(cfg, out))
        }
        Command::Train {
            mut common,
            data,
            epochs,
            seed,
            resume,
        } => {
            push(&mut common.overrides, "train.epochs", epochs);
            push(&mut common.overrides, "train.seed", seed);
            let multi = seeds_of(&common)?.len() > 1;
            fan_out(&common, |cfg, out| {
                let data = per_seed(&data, cfg, multi);
                cmd_train(cfg, &data, out, resume).map(|_| ())
            })
        }
        Command::Rollout {
            mut common,
            data,
            checkpoint,
            substeps,
            weights,
        } => {
            push(&mut common.overrides, "integrator.substeps", substeps);
            push(&mut common.overrides, "eval.weights", weights.as_deref().map(quoted));
            let multi = seeds_of(&common)?.len() > 1;
            fan_out(&common, |cfg, out| {
                let data = per_seed(&data, cfg, multi);
                let ckpt = checkpoint_path(&per_seed(&checkpoint, cfg, multi));
                cmd_rollout(cfg, &data, &ckpt, out)
            })
        }
        Command::Eval {
            mut common,
            data,
            checkpoint,
            baseline,
            protocol,
            v_mode,
            heldout,
            substeps,
            weights,
            formats,
        } => {
            if !protocol.is_empty() {
                let list: Vec<String> = protocol.iter().map(|p| quoted(p)).collect();
                common.overrides.push(format!("eval.protocols=[{}]", list.join(",")));
            }
            if !heldout.is_empty() {
                let list: Vec<String> = heldout.iter().map(|h| h.to_string()).collect();
                common.overrides.push(format!("eval.heldout=[{}]", list.join(",")));
            }
            if !formats.is_empty() {
                let list: Vec<String> = formats.iter().map(|f| quoted(f)).collect();
                common.overrides.push(format!("eval.formats=[{}]", list.join(",")));
            }
            push(&mut common.overrides, "eval.v_mode", v_mode.as_deref().map(quoted));
            push(&mut common.overrides, "eval.weights", weights.as_deref().map(quoted));
            push(&mut common.overrides, "integrator.substeps", substeps);
            let multi = seeds_of(&common)?.len() > 1;
            fan_out(&common, |cfg, out| {
                let data = per_seed(&data, cfg, multi);
                let source = match (&checkpoint, baseline) {
                    (_, Some(Baseline::Frozen)) => None,
                    (Some(c), None) => Some(checkpoint_path(&per_seed(c, cfg, multi))),
                    (None, None) => return Err(Error::config("/", "eval needs --checkpoint or --baseline")),
                };
                cmd_eval(cfg, &data, source.as_deref(), out).map(|_| ())
            })
        }
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()).map(|_| ()),
    }
}

fn seeds_of(common: &Common) -> Result<Vec<u64>> {
    if !common.seeds.is_empty() {
        return Ok(common.seeds.clone());
    }
    Ok(ExperimentConfig::load(common.config.as_deref(), &common.overrides)?.seeds)
}

fn per_seed(base: &Path, cfg: &ExperimentConfig, multi: bool) -> PathBuf {
    if multi {
        let sub = base.join(format!("seed_{}", cfg.seeds[0]));
        if sub.exists() {
            return sub;
        }
    }
    base.to_path_buf()
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("POPMECH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(jobs).max(1)
}

/// Loads the config and runs `job` once, or once per seed on a worker pool
/// with `seed_<s>` output subdirectories.
fn fan_out<F>(common: &Common, job: F) -> Result<()>
where
    F: Fn(&ExperimentConfig, &Path) -> Result<()> + Sync,
{
    let mut base = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    if !common.seeds.is_empty() {
        base.seeds = common.seeds.clone();
    }
    let out = common.out.clone().unwrap_or_else(|| base.output_dir.clone());
    let seeds = base.seeds.clone();
    match seeds.len() {
        0 => job(&base, &out),
        1 => job(&base.with_seed(seeds[0]), &out),
        n => {
            let next = AtomicUsize::new(0);
            let errors = Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for _ in 0..worker_count(n) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= n {
                            break;
                        }
                        let cfg = base.with_seed(seeds[i]);
                        if let Err(e) = job(&cfg, &out.join(format!("seed_{}", seeds[i]))) {
                            errors.lock().expect("no poisoned lock").push((seeds[i], e));
                        }
                    });
                }
            });
            let mut errors = errors.into_inner().expect("no poisoned lock");
            errors.sort_by_key(|(s, _)| *s);
            for (s, e) in &errors[errors.len().min(1)..] {
                eprintln!("error (seed {s}): {e}");
            }
            match errors.into_iter().next() {
                Some((_, e)) => Err(e),
                None => Ok(()),
            }
        }
    }
}

fn provenance(cfg: &ExperimentConfig, command: &str) -> serde_json::Value {
    json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seeds": cfg.seeds,
        "tool_version": env!("CARGO_PKG_VERSION"),
    })
}

fn write_bundles(cfg: &ExperimentConfig, out: &Path, train: &SnapshotDataset, test: &SnapshotDataset, command: &str) -> Result<()> {
    let hash = cfg.hash();
    let mut prov = provenance(cfg, command);
    prov["seed"] = json!(if command == "gen-sde" { cfg.sde.seed } else { cfg.boids.seed });
    save_dataset(&out.join("train"), train, Some(&hash), Some(prov.clone()))?;
    save_dataset(&out.join("test"), test, Some(&hash), Some(prov))?;
    write_json(&out.join("config.json"), &serde_json::to_value(cfg).expect("config serializes"))
}

pub fn cmd_gen_sde(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = gen_sde(&cfg.sde)?;
    write_bundles(cfg, out, &data.train, &data.test, "gen-sde")
}

pub fn cmd_gen_boids(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = gen_boids(&cfg.boids)?;
    write_bundles(cfg, out, &data.train, &data.test, "gen-boids")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The training split, and the test split when one was written.
pub fn load_splits(data: &Path) -> Result<(SnapshotDataset, SnapshotDataset)> {
    let train_dir = data.join("train");
    let train = if train_dir.join("manifest.json").exists() {
        load_dataset(&train_dir)?
    } else if data.join("manifest.json").exists() {
        load_dataset(data)?
    } else {
        return Err(Error::data(
            data.display().to_string(),
            format!("no dataset found, expected {}", train_dir.join("manifest.json").display()),
        ));
    };
    let test_dir = data.join("test");
    let test = if test_dir.join("manifest.json").exists() {
        load_dataset(&test_dir)?
    } else {
        train.slice(0..0)
    };
    Ok((train, test))
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainState> {
    let (train, _) = load_splits(data)?;
    let v0 = cfg.initial_velocity(&train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let mut trainer = if resume {
        let (state, _) = load_checkpoint(&ckpt)?;
        if state.params.arch != cfg.energy {
            return Err(Error::config("/energy", "architecture differs from the checkpoint being resumed"));
        }
        Trainer::resume(&train, v0, cfg.train.clone(), cfg.integrator.clone(), state)?
    } else {
        Trainer::new(&train, v0, &cfg.energy, cfg.train.clone(), cfg.integrator.clone())?
    };
    let file = if resume {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let hash = cfg.hash();
    let result = trainer.run(Some(&mut log));
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    result?;
    save_checkpoint(&ckpt, &trainer.state, Some(&hash))?;
    let last = trainer.state.history.last();
    write_json(
        &out.join(SUMMARY_FILE),
        &json!({
            "epochs": trainer.state.epoch,
            "final_gamma": trainer.state.gamma,
            "final_loss": last.map(|e| e.loss),
            "blur": trainer.cfg.loss.blur,
            "provenance": provenance(cfg, "train"),
        }),
    )?;
    println!("{}: epochs {}, gamma {}", out.display(), trainer.state.epoch, trainer.state.gamma);
    Ok(trainer.state)
}

fn mechanics_from(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Mechanics> {
    let (state, _) = load_checkpoint(ckpt)?;
    let model = match cfg.eval.weights {
        Weights::Ema => state.ema_model(),
        Weights::Live => state.model(),
    };
    Ok(Mechanics {
        model,
        gamma: state.gamma,
    })
}

fn check_model_dim(model: &EnergyModel, ds: &SnapshotDataset, ckpt: &Path) -> Result<()> {
    match model.dim() {
        Some(d) if d != ds.dim => Err(Error::data(
            ckpt.display().to_string(),
            format!("checkpoint is for dimension {d} but the dataset has dimension {}", ds.dim),
        )),
        _ => Ok(()),
    }
}

pub fn cmd_rollout(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (train, test) = load_splits(data)?;
    let mech = mechanics_from(cfg, ckpt)?;
    check_model_dim(&mech.model, &train, ckpt)?;
    let v0 = cfg.initial_velocity(&train)?;
    let start = MechState {
        x: train.snapshots[0].clone(),
        v: v0,
        t: train.times[0],
    };
    let boundaries: Vec<f64> = train.times[1..].iter().chain(&test.times).copied().collect();
    let traj = rollout_model(&mech.model, mech.gamma, &cfg.integrator, start, &boundaries)?;
    let ds = SnapshotDataset::from_trajectory(&traj)?;
    let hash = cfg.hash();
    save_dataset(&out.join("trajectory"), &ds, Some(&hash), Some(provenance(cfg, "rollout")))?;
    let diag = diagnostics(&traj, Some(&mech.model))?;
    write_json(&out.join("diagnostics.json"), &serde_json::to_value(diag).expect("diagnostics serialize"))
}

/// Runs every configured protocol and writes its files under `out`.
pub fn cmd_eval(cfg: &ExperimentConfig, data: &Path, ckpt: Option<&Path>, out: &Path) -> Result<Vec<EvalReport>> {
    let (train, test) = load_splits(data)?;
    let mech = match ckpt {
        Some(c) => {
            let m = mechanics_from(cfg, c)?;
            check_model_dim(&m.model, &train, c)?;
            m
        }
        None => frozen_baseline(),
    };
    let v0 = cfg.initial_velocity(&train)?;
    let mut reports = Vec::new();
    for protocol in &cfg.eval.protocols {
        let mut report = match protocol {
            Protocol::Forecast => match cfg.eval.forecast_resample {
                None => forecast_eval(&mech, &train, &test, &v0, &cfg.integrator)?,
                Some(n) => {
                    let (x, v) = kde_resample(&train.snapshots[0], &v0, n, cfg.train.seed)?;
                    let start = MechState { x, v, t: train.times[0] };
                    forecast_from(&mech, start, &train, &test, &cfg.integrator)?
                }
            },
            Protocol::Interpolate => interpolate_all(cfg, &mech, &train, &v0)?,
        };
        report.config_hash = Some(cfg.hash());
        report_emit(&report, out, &cfg.eval.formats)?;
        for (name, v) in [("train", report.train_mean), ("test", report.test_mean), ("all", report.mean())] {
            if let Some(v) = v {
                println!("{} {} {name} mean W1 {v:.6}", out.display(), protocol.name());
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

fn interpolate_all(cfg: &ExperimentConfig, mech: &Mechanics, ds: &SnapshotDataset, v0: &popmech_autodiff::Array) -> Result<EvalReport> {
    let held: Vec<usize> = if cfg.eval.heldout.is_empty() {
        (1..ds.intervals()).collect()
    } else {
        cfg.eval.heldout.clone()
    };
    if held.is_empty() {
        return Err(Error::data("interpolate", "need at least three snapshots for an interior held-out time"));
    }
    let mut entries = Vec::new();
    let mut snaps = Vec::new();
    for h in held {
        let r = interpolate_eval(mech, ds, h, cfg.eval.v_mode, Some(v0), &cfg.integrator)?;
        entries.extend(r.entries);
        snaps.extend(r.snapshots);
    }
    Ok(EvalReport::new(Protocol::Interpolate, Some(cfg.eval.v_mode), entries, snaps))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Collects `{protocol}_all.json` from each run (or its `seed_*`
/// subdirectories) and writes per-protocol aggregates.
pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<serde_json::Value> {
    let mut dirs = Vec::new();
    for r in runs {
        let mut seeds: Vec<PathBuf> = match fs::read_dir(r) {
            Ok(it) => it
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_")))
                .collect(),
            Err(e) => return Err(Error::io(r, e)),
        };
        seeds.sort();
        if seeds.is_empty() {
            dirs.push(r.clone());
        } else {
            dirs.extend(seeds);
        }
    }
    let mut result = serde_json::Map::new();
    for protocol in [Protocol::Forecast, Protocol::Interpolate] {
        let mut reports = Vec::new();
        for d in &dirs {
            let p = d.join(format!("{}_{ALL_TIMES}.json", protocol.name()));
            if p.exists() {
                reports.push(read_report(&p)?);
            }
        }
        if reports.is_empty() {
            continue;
        }
        let agg = aggregate(&reports);
        for (split, a) in [("train", &agg.train), ("test", &agg.test), ("heldout", &agg.heldout)] {
            if let (Some(m), Some(p)) = (a.mean_over_times_then_seeds, a.pooled) {
                println!(
                    "{} {split}: {:.4} ± {:.4} (mean over times then seeds, {} seeds); {:.4} ± {:.4} (pooled, {} entries)",
                    protocol.name(),
                    m.mean,
                    m.se,
                    m.count,
                    p.mean,
                    p.se,
                    p.count
                );
            }
        }
        result.insert(protocol.name().to_string(), serde_json::to_value(agg).expect("aggregate serializes"));
    }
    if result.is_empty() {
        return Err(Error::data("report", "no eval reports found in the given runs"));
    }
    let value = serde_json::Value::Object(result);
    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| runs[0].clone());
    write_json(&dest.join("aggregate.json"), &value)?;
    Ok(value)
}

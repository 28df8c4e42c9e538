//! Experiment configuration: one TOML file, flag overrides, a content hash.

use std::fs;
use std::path::{Path, PathBuf};

use popmech_autodiff::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{analytic_gf_v0, estimate_v0, BoidsSpec, SdeSpec, SnapshotDataset, V0Mode};
use crate::energy::{Architecture, EnergyConfig};
use crate::error::{Error, Result};
use crate::eval::{Format, Protocol, VMode};
use crate::integrator::IntegratorConfig;
use crate::trainer::TrainConfig;

/// Where the initial velocities for training and forecasting come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum V0Source {
    Provided,
    #[default]
    Zero,
    PairedFiniteDifference,
    /// Probability-flow velocity of the `[sde]` section's potential.
    AnalyticGf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    #[default]
    Ema,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    pub v_mode: VMode,
    /// Held-out indices for interpolation; every interior time when empty.
    pub heldout: Vec<usize>,
    pub weights: Weights,
    pub formats: Vec<Format>,
    /// Forecast from this many points resampled from a kernel density fit
    /// of the first snapshot instead of the snapshot itself.
    pub forecast_resample: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Forecast],
            v_mode: VMode::Carried,
            heldout: Vec::new(),
            weights: Weights::Ema,
            formats: vec![Format::Csv, Format::Json, Format::Svg],
            forecast_resample: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// When set, each seed overrides every seed below and runs separately.
    pub seeds: Vec<u64>,
    pub v0: V0Source,
    pub sde: SdeSpec,
    pub boids: BoidsSpec,
    pub energy: Architecture,
    pub train: TrainConfig,
    /// Integration used at inference (rollout and eval).
    pub integrator: IntegratorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: Vec::new(),
            v0: V0Source::default(),
            sde: SdeSpec::default(),
            boids: BoidsSpec::default(),
            energy: Architecture::Attention(EnergyConfig::default()),
            train: TrainConfig::default(),
            integrator: IntegratorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            serde_path_to_error::Segment::Seq { index } => out.push_str(&index.to_string()),
            serde_path_to_error::Segment::Map { key } => out.push_str(key),
            serde_path_to_error::Segment::Enum { variant } => out.push_str(variant),
            serde_path_to_error::Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Sets `key.path = value` in a TOML tree. The value is parsed as TOML and
/// taken as a bare string when that fails.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("/", format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config("/", format!("bad override key {key:?}")));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("/{}", parts[..=i].join("/")), "cannot override inside a non-table value")
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a TOML document with overrides applied on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("/", format!("invalid TOML: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(toml::Value::Table(energy)) = table.get_mut("energy") {
            energy.entry("kind").or_insert_with(|| toml::Value::String("attention".into()));
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::config(pointer(e.path()), e.inner().message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when no file is given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        self.boids.validate()?;
        self.energy.validate()?;
        self.train.validate()?;
        self.integrator.validate()?;
        if self.eval.forecast_resample == Some(0) {
            return Err(Error::config("/eval/forecast_resample", "must be ≥ 1 when set"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A copy with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.sde.seed = seed;
        c.boids.seed = seed;
        c.train.seed = seed;
        c.seeds = vec![seed];
        c
    }

    /// Initial velocities for `ds` according to [`V0Source`].
    pub fn initial_velocity(&self, ds: &SnapshotDataset) -> Result<Array> {
        match self.v0 {
            V0Source::Provided => estimate_v0(ds, V0Mode::Provided),
            V0Source::Zero => estimate_v0(ds, V0Mode::Zero),
            V0Source::PairedFiniteDifference => estimate_v0(ds, V0Mode::PairedFiniteDifference),
            V0Source::AnalyticGf => {
                let x0 = ds.snapshots.first().ok_or_else(|| Error::data("v0", "empty dataset"))?;
                analytic_gf_v0(&self.sde, x0)
            }
        }
    }
}

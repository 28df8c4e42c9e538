//! Discretize-then-optimize training: roll the learned mechanics out from
//! the first snapshot for a random number of intervals, score every
//! predicted snapshot against the observed one, and backpropagate through
//! the whole rollout.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use popmech_autodiff::{Array, GradOptions, Graph, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, SnapshotDataset};
use crate::divergence::{estimate_blur, sinkhorn_divergence, Blur, DivergenceConfig, SinkhornReport};
use crate::energy::checkpoint::{params_from_parts, read_archive, write_archive};
use crate::energy::{force_var, init_params, Architecture, Dropout, EnergyModel, EnergyParams};
use crate::error::{Error, Result};
use crate::integrator::{rollout, IntegratorConfig, MechState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_theta: f64,
    pub lr_gamma: f64,
    pub gamma_init: f64,
    pub gamma_learnable: bool,
    /// Friction used when `gamma_learnable` is off.
    pub gamma_fixed_value: f64,
    pub epochs: usize,
    /// Integrator steps per interval during training.
    pub substeps_train: usize,
    /// Particles per loss evaluation; all of them when unset.
    pub minibatch: Option<usize>,
    pub loss: DivergenceConfig,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_theta: 1e-4,
            lr_gamma: 1e-2,
            gamma_init: 1.0,
            gamma_learnable: true,
            gamma_fixed_value: 0.0,
            epochs: 1000,
            substeps_train: 1,
            minibatch: None,
            loss: DivergenceConfig::default(),
            ema_decay: 0.999,
            weight_decay: 0.0,
            grad_clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("/train/{f}"), m));
        if !(self.lr_theta > 0.0) {
            return bad("lr_theta", "must be > 0");
        }
        if !(self.lr_gamma > 0.0) {
            return bad("lr_gamma", "must be > 0");
        }
        if !(self.gamma_init >= 0.0) || !(self.gamma_fixed_value >= 0.0) {
            return bad("gamma_init", "friction must be ≥ 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if self.substeps_train == 0 {
            return bad("substeps_train", "must be ≥ 1");
        }
        if self.minibatch == Some(0) {
            return bad("minibatch", "must be ≥ 1 when set");
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad("grad_clip_norm", "must be > 0 when set");
            }
        }
        self.loss.validate()
    }
}

/// Adam moments for a list of arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(like: &[Array]) -> Self {
        Self {
            m: like.iter().map(|a| Array::zeros(a.shape().to_vec())).collect(),
            v: like.iter().map(|a| Array::zeros(a.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay.
pub fn adam_update(adam: &mut Adam, params: &mut [Array], grads: &[Array], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != adam.m.len() {
        return Err(Error::data("adam_update", "parameter, gradient and moment counts differ"));
    }
    adam.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(adam.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(adam.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::data("adam_update", format!("gradient {k} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        let m = adam.m[k].data_mut();
        let v = adam.v[k].data_mut();
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            *w -= lr * (step + weight_decay * *w);
        }
    }
    Ok(())
}

/// `ema ← decay · ema + (1 − decay) · params`.
pub fn ema_update(ema: &mut [Array], params: &[Array], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub k: usize,
    pub loss: f64,
    pub gamma: f64,
    /// Every Sinkhorn solve of the epoch met its tolerance.
    pub converged: bool,
    pub wall_s: f64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EnergyParams,
    pub ema: EnergyParams,
    pub gamma: f64,
    pub adam: Adam,
    pub adam_gamma: Adam,
    pub epoch: usize,
    pub history: Vec<LogEntry>,
}

impl TrainState {
    pub fn new(arch: &Architecture, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params(arch, cfg.seed)?;
        let gamma = if cfg.gamma_learnable { cfg.gamma_init } else { cfg.gamma_fixed_value };
        Ok(Self {
            adam: Adam::new(&params.arrays()),
            adam_gamma: Adam::new(&[Array::scalar(0.0)]),
            ema: params.clone(),
            params,
            gamma,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> EnergyModel {
        EnergyModel::Learned(self.params.clone())
    }

    pub fn ema_model(&self) -> EnergyModel {
        EnergyModel::Learned(self.ema.clone())
    }
}

/// The loss and its gradients for one rollout horizon.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Vec<Array>,
    pub grad_gamma: Option<f64>,
    pub reports: Vec<SinkhornReport>,
}

fn subsample(n: usize, mb: Option<usize>, rng: &mut dyn rand::RngCore) -> Option<Vec<usize>> {
    match mb {
        Some(m) if m < n => {
            let mut idx = sample(rng, n, m).into_vec();
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    }
}

fn pick(a: &Array, idx: &Option<Vec<usize>>) -> Array {
    match idx {
        Some(i) => a.select_rows(i),
        None => a.clone(),
    }
}

/// Records `L = (1/K) Σ_{i=1..K} D(X̂_{t_i}, X_{t_i})` on `g`.
///
/// `pv` holds one var per parameter tensor and `gamma` the friction node.
/// With a minibatch size set, one subsample of particles is drawn and
/// followed through the whole rollout; targets use the same rows when the
/// data are paired and an independent subsample otherwise.
#[allow(clippy::too_many_arguments)]
pub fn loss_for_horizon<'g>(
    g: &'g Graph,
    model: &EnergyModel,
    pv: &[Var<'g>],
    gamma: Var<'g>,
    ds: &SnapshotDataset,
    v0: &Array,
    k: usize,
    cfg: &TrainConfig,
    integ: &IntegratorConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(Var<'g>, Vec<SinkhornReport>)> {
    let m = ds.intervals();
    if k == 0 || k > m {
        return Err(Error::config("/train", format!("horizon K = {k} outside 1..={m}")));
    }
    let x0 = &ds.snapshots[0];
    if v0.shape() != x0.shape() {
        return Err(Error::data("train", format!("v0 shape {:?} does not match X0 {:?}", v0.shape(), x0.shape())));
    }
    let idx = subsample(x0.rows(), cfg.minibatch, rng);
    let state0 = MechState {
        x: g.constant(pick(x0, &idx)),
        v: g.constant(pick(v0, &idx)),
        t: ds.times[0],
    };
    let mut traj = {
        let mut dropout = Dropout { rng: &mut *rng };
        let mut force = |x: &Var<'g>, t: f64| force_var(model, pv, *x, Some(t), true, Some(&mut dropout));
        rollout(integ.scheme, state0, &mut force, &gamma, &ds.times[1..=k], cfg.substeps_train)?
    };
    let mut total: Option<Var<'g>> = None;
    let mut reports = Vec::with_capacity(k);
    for (i, state) in traj.drain(..).enumerate().skip(1) {
        let target = &ds.snapshots[i];
        let tidx = if ds.paired { idx.clone() } else { subsample(target.rows(), cfg.minibatch, rng) };
        let y = g.constant(pick(target, &tidx));
        let (d, rep) = sinkhorn_divergence(state.x, None, y, None, &cfg.loss)?;
        reports.push(rep);
        total = Some(match total {
            Some(t) => t.add(d)?,
            None => d,
        });
    }
    let loss = total.expect("K ≥ 1").scale(1.0 / k as f64);
    Ok((loss, reports))
}

/// Evaluates the loss for horizon `k` and its gradients at the current state.
pub fn loss_and_grads(
    state: &TrainState,
    ds: &SnapshotDataset,
    v0: &Array,
    k: usize,
    cfg: &TrainConfig,
    integ: &IntegratorConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<LossEval> {
    let g = Graph::new();
    let model = state.model();
    let pv: Vec<Var<'_>> = state.params.tensors.iter().map(|t| g.param(t.value.clone())).collect();
    let gamma = if cfg.gamma_learnable {
        g.param(Array::scalar(state.gamma))
    } else {
        g.constant(Array::scalar(state.gamma))
    };
    let (loss, reports) = loss_for_horizon(&g, &model, &pv, gamma, ds, v0, k, cfg, integ, rng)?;
    let mut wrt = pv.clone();
    if cfg.gamma_learnable {
        wrt.push(gamma);
    }
    let grads = g.grad(loss, &wrt, GradOptions::default().allow_unused())?;
    let mut grads: Vec<Array> = grads.iter().map(|v| (*v.value()).clone()).collect();
    let grad_gamma = if cfg.gamma_learnable { grads.pop().map(|a| a.item()) } else { None };
    Ok(LossEval {
        loss: loss.item(),
        grads,
        grad_gamma,
        reports,
    })
}

/// Owns a training run: dataset, initial velocities, configs and state.
pub struct Trainer<'a> {
    pub ds: &'a SnapshotDataset,
    pub v0: Array,
    pub cfg: TrainConfig,
    pub integ: IntegratorConfig,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    /// Starts from freshly initialized weights. An `auto` blur is resolved
    /// from the first snapshot here.
    pub fn new(
        ds: &'a SnapshotDataset,
        v0: Array,
        arch: &Architecture,
        cfg: TrainConfig,
        integ: IntegratorConfig,
    ) -> Result<Self> {
        let state = TrainState::new(arch, &cfg)?;
        Self::resume(ds, v0, cfg, integ, state)
    }

    /// Continues from an existing state.
    pub fn resume(
        ds: &'a SnapshotDataset,
        v0: Array,
        mut cfg: TrainConfig,
        integ: IntegratorConfig,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        integ.validate()?;
        if ds.intervals() == 0 {
            return Err(Error::data("train", "need at least two snapshots"));
        }
        if ds.dim != state.params.arch.dim() {
            return Err(Error::data(
                "train",
                format!("dataset dim {} but model dim {}", ds.dim, state.params.arch.dim()),
            ));
        }
        if v0.shape() != ds.snapshots[0].shape() {
            return Err(Error::data("train", "v0 must match the first snapshot's shape"));
        }
        if let Some(mb) = cfg.minibatch {
            if mb > ds.snapshots[0].rows() {
                return Err(Error::config("/train/minibatch", "larger than the number of particles"));
            }
        }
        if let Blur::Auto(_) = cfg.loss.blur {
            cfg.loss.blur = Blur::Value(estimate_blur(&ds.snapshots[0])?);
        }
        Ok(Self {
            ds,
            v0,
            cfg,
            integ,
            state,
        })
    }

    /// Runs one epoch and returns its log line.
    pub fn epoch(&mut self) -> Result<LogEntry> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64));
        let k = rng.random_range(1..=self.ds.intervals());
        let eval = loss_and_grads(&self.state, self.ds, &self.v0, k, &self.cfg, &self.integ, &mut rng)?;
        if !eval.loss.is_finite() {
            return Err(Error::non_finite("loss", format!("epoch {epoch}, horizon K = {k}")));
        }
        let mut grads = eval.grads;
        if let Some(t) = grads.iter().position(|g| !g.is_finite()) {
            let name = &self.state.params.tensors[t].name;
            return Err(Error::non_finite(format!("gradient of {name}"), format!("epoch {epoch}, horizon K = {k}")));
        }
        if let Some(c) = self.cfg.grad_clip_norm {
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                grads = grads.into_iter().map(|g| g.map(|v| v * s)).collect();
            }
        }
        let mut values = self.state.params.arrays();
        adam_update(&mut self.state.adam, &mut values, &grads, self.cfg.lr_theta, self.cfg.weight_decay)?;
        if let Some(gg) = eval.grad_gamma {
            if !gg.is_finite() {
                return Err(Error::non_finite("gradient of gamma", format!("epoch {epoch}, horizon K = {k}")));
            }
            let mut gam = [Array::scalar(self.state.gamma)];
            adam_update(&mut self.state.adam_gamma, &mut gam, &[Array::scalar(gg)], self.cfg.lr_gamma, 0.0)?;
            self.state.gamma = gam[0].item().max(0.0);
        }
        let mut ema = self.state.ema.arrays();
        ema_update(&mut ema, &values, self.cfg.ema_decay);
        self.state.params = self.state.params.with_values(values)?;
        self.state.ema = self.state.ema.with_values(ema)?;
        self.state.epoch += 1;
        let entry = LogEntry {
            epoch,
            k,
            loss: eval.loss,
            gamma: self.state.gamma,
            converged: eval.reports.iter().all(|r| r.converged),
            wall_s: start.elapsed().as_secs_f64(),
        };
        self.state.history.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `cfg.epochs` epochs have been completed in total, writing
    /// one JSON line per epoch to `log` when given.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            let entry = self.epoch()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&entry).map_err(|e| Error::Numeric(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(
    ds: &SnapshotDataset,
    v0: &Array,
    arch: &Architecture,
    cfg: &TrainConfig,
    integ: &IntegratorConfig,
) -> Result<TrainState> {
    let mut t = Trainer::new(ds, v0.clone(), arch, cfg.clone(), integ.clone())?;
    t.run(None)?;
    Ok(t.state)
}

/// Writes weights, EMA weights, optimizer moments, γ and the loss history.
pub fn save_checkpoint(path: &Path, state: &TrainState, config_hash: Option<&str>) -> Result<()> {
    let meta = serde_json::json!({
        "arch": state.params.arch,
        "seed": state.params.seed,
        "gamma": state.gamma,
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "adam_gamma": [state.adam_gamma.t, state.adam_gamma.m[0].item(), state.adam_gamma.v[0].item()],
        "history": state.history,
        "config_hash": config_hash,
    });
    let mut bufs: Vec<(String, &Array)> = Vec::new();
    for (prefix, list) in [
        ("params", &state.params.tensors.iter().map(|t| &t.value).collect::<Vec<_>>()),
        ("ema", &state.ema.tensors.iter().map(|t| &t.value).collect::<Vec<_>>()),
        ("adam_m", &state.adam.m.iter().collect::<Vec<_>>()),
        ("adam_v", &state.adam.v.iter().collect::<Vec<_>>()),
    ] {
        for (t, a) in state.params.tensors.iter().zip(list.iter()) {
            bufs.push((format!("{prefix}/{}", t.name), *a));
        }
    }
    write_archive(path, meta, &bufs)
}

/// Reads a checkpoint written by [`save_checkpoint`]; also returns the
/// config hash recorded with it.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, Option<String>)> {
    let ctx = path.display().to_string();
    let (meta, bufs) = read_archive(path)?;
    let mut groups: [Vec<(String, Array)>; 4] = Default::default();
    for (name, a) in bufs {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::data(&ctx, format!("unexpected buffer {name}")))?;
        let slot = match prefix {
            "params" => 0,
            "ema" => 1,
            "adam_m" => 2,
            "adam_v" => 3,
            _ => return Err(Error::data(&ctx, format!("unexpected buffer {name}"))),
        };
        groups[slot].push((rest.to_string(), a));
    }
    let [p, e, m, v] = groups;
    let params = params_from_parts(&meta, p, &ctx)?;
    let ema = params_from_parts(&meta, e, &ctx)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::data(&ctx, format!("missing field {k}")));
    let gamma = field("gamma")?.as_f64().ok_or_else(|| Error::data(&ctx, "gamma"))?;
    let epoch = field("epoch")?.as_u64().ok_or_else(|| Error::data(&ctx, "epoch"))? as usize;
    let adam_t = field("adam_t")?.as_u64().ok_or_else(|| Error::data(&ctx, "adam_t"))?;
    let ag: (u64, f64, f64) =
        serde_json::from_value(field("adam_gamma")?.clone()).map_err(|e| Error::data(&ctx, e.to_string()))?;
    let history: Vec<LogEntry> =
        serde_json::from_value(field("history")?.clone()).map_err(|e| Error::data(&ctx, e.to_string()))?;
    let hash = meta.get("config_hash").and_then(|h| h.as_str()).map(str::to_owned);
    if m.len() != params.tensors.len() || v.len() != params.tensors.len() {
        return Err(Error::data(&ctx, "optimizer moments do not match the parameters"));
    }
    let state = TrainState {
        adam: Adam {
            m: m.into_iter().map(|(_, a)| a).collect(),
            v: v.into_iter().map(|(_, a)| a).collect(),
            t: adam_t,
        },
        adam_gamma: Adam {
            m: vec![Array::scalar(ag.1)],
            v: vec![Array::scalar(ag.2)],
            t: ag.0,
        },
        params,
        ema,
        gamma,
        epoch,
        history,
    };
    Ok((state, hash))
}

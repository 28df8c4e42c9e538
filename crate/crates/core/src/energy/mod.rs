//! Population potential energies and the accelerations they induce.
//!
//! Every energy here is a scalar function `Ψ(X)` of a whole particle cloud
//! `X ∈ ℝ^{N×d}`. Builtin energies are normalized as means over particles
//! (or over pairs, for interactions), so the per-particle force is
//! `−N ∇_{x_j} Ψ` and stays of order one whatever the cloud size. The
//! learned model follows the same convention through its mean-pool readout.

mod analytic;
mod attention;
pub mod checkpoint;
mod toy;

pub use analytic::{functional_derivative_check, AnalyticEnergy, FunctionalCheck};
pub use attention::{time_features, Activation, EnergyConfig};
pub use toy::MeanFieldConfig;

use popmech_autodiff::{Array, GradOptions, Graph, Var};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A learnable architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Attention(EnergyConfig),
    MeanField(MeanFieldConfig),
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match self {
            Architecture::Attention(c) => c.dim,
            Architecture::MeanField(c) => c.dim,
        }
    }

    pub fn time_features(&self) -> usize {
        match self {
            Architecture::Attention(c) => c.time_features,
            Architecture::MeanField(_) => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Attention(c) => c.validate(),
            Architecture::MeanField(c) => c.validate(),
        }
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array,
}

/// Weights of a learned energy, in a fixed declared order.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyParams {
    pub arch: Architecture,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

impl EnergyParams {
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn arrays(&self) -> Vec<Array> {
        self.tensors.iter().map(|t| t.value.clone()).collect()
    }

    /// Same architecture and names, new values in declared order.
    pub fn with_values(&self, values: Vec<Array>) -> Result<Self> {
        if values.len() != self.tensors.len() {
            return Err(Error::data(
                "params",
                format!("expected {} tensors, got {}", self.tensors.len(), values.len()),
            ));
        }
        let mut out = self.clone();
        for (t, v) in out.tensors.iter_mut().zip(values) {
            if t.value.shape() != v.shape() {
                return Err(Error::data(
                    format!("params/{}", t.name),
                    format!("shape {:?} does not match {:?}", v.shape(), t.value.shape()),
                ));
            }
            t.value = v;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }
}

/// Draws initial weights for `arch`, deterministically from `seed`.
///
/// Weights and biases are uniform in `±1/√fan_in`; the final scalar head
/// bias starts at zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<EnergyParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = match arch {
        Architecture::Attention(c) => attention::init(c, &mut rng),
        Architecture::MeanField(c) => toy::init(c, &mut rng),
    };
    Ok(EnergyParams {
        arch: arch.clone(),
        seed,
        tensors,
    })
}

pub(crate) fn uniform_fan_in(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    use rand::Rng;
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(shape, data).expect("shape and length agree")
}

/// Either a learned network or a closed-form functional.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyModel {
    Learned(EnergyParams),
    Analytic(AnalyticEnergy),
}

impl From<EnergyParams> for EnergyModel {
    fn from(p: EnergyParams) -> Self {
        EnergyModel::Learned(p)
    }
}

impl From<AnalyticEnergy> for EnergyModel {
    fn from(a: AnalyticEnergy) -> Self {
        EnergyModel::Analytic(a)
    }
}

/// Dropout source for a training-mode forward pass.
pub struct Dropout<'a> {
    pub rng: &'a mut dyn RngCore,
}

impl EnergyModel {
    /// State dimension the model expects, if it is fixed.
    pub fn dim(&self) -> Option<usize> {
        match self {
            EnergyModel::Learned(p) => Some(p.arch.dim()),
            EnergyModel::Analytic(a) => a.dim(),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        match self {
            EnergyModel::Learned(p) => &p.tensors,
            EnergyModel::Analytic(_) => &[],
        }
    }

    /// Records `Ψ(x, t)` on the graph of `x`, reading weights from `pv`
    /// (one var per tensor of [`EnergyModel::params`]).
    pub fn energy_var<'g>(
        &self,
        pv: &[Var<'g>],
        x: Var<'g>,
        t: Option<f64>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::data("energy", format!("positions must be N×d with N ≥ 1, got {shape:?}")));
        }
        if let Some(d) = self.dim() {
            if shape[1] != d {
                return Err(Error::data("energy", format!("model dim {d} but positions have {} columns", shape[1])));
            }
        }
        match self {
            EnergyModel::Learned(p) => {
                if pv.len() != p.tensors.len() {
                    return Err(Error::data("energy", "parameter count mismatch"));
                }
                match &p.arch {
                    Architecture::Attention(c) => attention::forward(c, pv, x, t, dropout),
                    Architecture::MeanField(c) => toy::forward(c, pv, x),
                }
            }
            EnergyModel::Analytic(a) => a.energy_var(x),
        }
    }

    /// `Ψ(X, t)` as a number.
    pub fn energy(&self, x: &Array, t: Option<f64>) -> Result<f64> {
        let g = Graph::new();
        let pv = constants(&g, self.params());
        let xv = g.constant(x.clone());
        Ok(self.energy_var(&pv, xv, t, None)?.item())
    }

    /// Conservative per-particle force `−N ∇_{x_j} Ψ(X, t)`.
    pub fn force(&self, x: &Array, t: Option<f64>) -> Result<Array> {
        let g = Graph::new();
        let pv = constants(&g, self.params());
        let xv = g.param(x.clone());
        let f = force_var(self, &pv, xv, t, false, None)?;
        Ok((*f.value()).clone())
    }

    /// `a_j = −N ∇_{x_j} Ψ(X, t) − γ v_j`.
    pub fn acceleration(&self, x: &Array, v: &Array, gamma: f64, t: Option<f64>) -> Result<Array> {
        if x.shape() != v.shape() {
            return Err(Error::data("acceleration", format!("X {:?} and V {:?} differ", x.shape(), v.shape())));
        }
        if !(gamma >= 0.0) {
            return Err(Error::config("gamma", format!("must be ≥ 0, got {gamma}")));
        }
        let f = self.force(x, t)?;
        Ok(f.zip_map(v, |a, b| a - gamma * b)?)
    }
}

pub(crate) fn constants<'g>(g: &'g Graph, tensors: &[Tensor]) -> Vec<Var<'g>> {
    tensors.iter().map(|t| g.constant(t.value.clone())).collect()
}

/// Records the force `−N ∇_x Ψ` on the graph of `x`.
///
/// If `x` is a constant node a differentiable copy is made first. With
/// `create_graph` the result stays differentiable with respect to `pv` and
/// upstream nodes, which is what training through a rollout needs.
pub fn force_var<'g>(
    model: &EnergyModel,
    pv: &[Var<'g>],
    x: Var<'g>,
    t: Option<f64>,
    create_graph: bool,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'g>> {
    let g = x.graph();
    let x = if x.requires_grad() { x } else { g.param((*x.value()).clone()) };
    let n = x.shape()[0] as f64;
    let psi = model.energy_var(pv, x, t, dropout)?;
    let opts = GradOptions {
        create_graph,
        allow_unused: true,
    };
    let grad = g.grad(psi, &[x], opts)?[0];
    let gv = grad.value();
    if !gv.is_finite() {
        let d = gv.cols();
        let j = gv.data().iter().position(|v| !v.is_finite()).unwrap_or(0) / d.max(1);
        return Err(Error::non_finite("energy gradient", format!("particle {j}")));
    }
    Ok(grad.scale(-n))
}

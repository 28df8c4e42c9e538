//! A small mean-field energy: a per-particle MLP potential plus a learnable
//! Gaussian interaction kernel.
//!
//! `Ψ(X) = (1/N) Σ_i w₂ · tanh(W₁ᵀ x_i + b₁) + (a / 2N²) Σ_{i,j} exp(−‖x_i − x_j‖² e^{−2s})`
//!
//! With `dim = 2` and `hidden = 7` it has exactly 30 parameters, small
//! enough to finite-difference a whole training pipeline.

use popmech_autodiff::{Array, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_fan_in, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanFieldConfig {
    pub dim: usize,
    pub hidden: usize,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self { dim: 2, hidden: 7 }
    }
}

impl MeanFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::config("/energy", "dim and hidden must be ≥ 1"));
        }
        Ok(())
    }
}

pub(super) fn init(c: &MeanFieldConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        Tensor {
            name: "mlp.w1".into(),
            value: uniform_fan_in(vec![c.dim, c.hidden], c.dim, rng),
        },
        Tensor {
            name: "mlp.b1".into(),
            value: uniform_fan_in(vec![c.hidden], c.dim, rng),
        },
        Tensor {
            name: "mlp.w2".into(),
            value: uniform_fan_in(vec![c.hidden, 1], c.hidden, rng),
        },
        Tensor {
            name: "kernel.amplitude".into(),
            value: Array::full(vec![1], 0.1),
        },
        Tensor {
            name: "kernel.log_width".into(),
            value: Array::zeros(vec![1]),
        },
    ]
}

pub(super) fn forward<'g>(_c: &MeanFieldConfig, pv: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
    let n = x.shape()[0] as f64;
    let (w1, b1, w2, amp, log_w) = (pv[0], pv[1], pv[2], pv[3], pv[4]);
    let single = x.matmul(w1)?.add(b1)?.tanh().matmul(w2)?.mean();
    let inv_w2 = log_w.scale(-2.0).exp();
    let kernel = x.sq_dist(x)?.mul(inv_w2)?.neg().exp().sum();
    let pair = kernel.mul(amp)?.scale(0.5 / (n * n));
    Ok(single.add(pair)?.sum())
}

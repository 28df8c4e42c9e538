//! Closed-form population energies with known functional derivatives.

use popmech_autodiff::{Array, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Builtin energy functionals.
///
/// * `Harmonic`: expectation functional `U[ρ] = ∫ ½ Σ_a k_a x_a² dρ`.
/// * `GaussianPair`: interaction `U[ρ] = ½ ∬ A exp(−‖x−y‖²/w²) dρ dρ`.
/// * `InvertedHarmonic`: `U[ρ] = −½ ∫ ‖∇V‖² dρ` for `V = ½ Σ_a k_a x_a²`,
///   the potential whose mechanics reproduce the gradient flow of `V`.
/// * `Zero`: no force at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticEnergy {
    Harmonic { stiffness: Vec<f64> },
    GaussianPair { amplitude: f64, width: f64 },
    InvertedHarmonic { stiffness: Vec<f64> },
    Zero,
}

impl AnalyticEnergy {
    /// Isotropic harmonic trap `U(x) = ½ ω² ‖x‖²`.
    pub fn harmonic(omega: f64, dim: usize) -> Self {
        AnalyticEnergy::Harmonic {
            stiffness: vec![omega * omega; dim],
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            AnalyticEnergy::Harmonic { stiffness } | AnalyticEnergy::InvertedHarmonic { stiffness } => {
                Some(stiffness.len())
            }
            _ => None,
        }
    }

    pub(super) fn energy_var<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let n = x.shape()[0] as f64;
        let diag = |k: Vec<f64>| -> Result<Var<'g>> {
            let len = k.len();
            Ok(g.constant(Array::new(vec![len], k)?))
        };
        Ok(match self {
            AnalyticEnergy::Harmonic { stiffness } => {
                x.square().mul(diag(stiffness.clone())?)?.sum().scale(0.5 / n)
            }
            AnalyticEnergy::InvertedHarmonic { stiffness } => {
                let k2 = stiffness.iter().map(|k| k * k).collect();
                x.square().mul(diag(k2)?)?.sum().scale(-0.5 / n)
            }
            AnalyticEnergy::GaussianPair { amplitude, width } => x
                .sq_dist(x)?
                .scale(-1.0 / (width * width))
                .exp()
                .sum()
                .scale(0.5 * amplitude / (n * n)),
            AnalyticEnergy::Zero => g.constant(Array::scalar(0.0)),
        })
    }

    /// `∇_x (δU/δρ)(x)` at every row of `at`, for the empirical measure of `cloud`.
    pub fn first_variation_gradient(&self, cloud: &Array, at: &Array) -> Array {
        let d = at.cols();
        let mut out = Array::zeros(vec![at.rows(), d]);
        for i in 0..at.rows() {
            let xi = at.row(i);
            let row = out.row_mut(i);
            match self {
                AnalyticEnergy::Harmonic { stiffness } => {
                    for a in 0..d {
                        row[a] = stiffness[a] * xi[a];
                    }
                }
                AnalyticEnergy::InvertedHarmonic { stiffness } => {
                    for a in 0..d {
                        row[a] = -stiffness[a] * stiffness[a] * xi[a];
                    }
                }
                AnalyticEnergy::GaussianPair { amplitude, width } => {
                    let m = cloud.rows() as f64;
                    let w2 = width * width;
                    for j in 0..cloud.rows() {
                        let xj = cloud.row(j);
                        let r2: f64 = xi.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
                        let k = amplitude * (-r2 / w2).exp();
                        for a in 0..d {
                            row[a] += k * (-2.0 * (xi[a] - xj[a]) / w2) / m;
                        }
                    }
                }
                AnalyticEnergy::Zero => {}
            }
        }
        out
    }
}

/// Outcome of comparing `∇_{x_j} Ψ` against `(1/N) ∇(δU/δρ)(x_j)`.
#[derive(Clone, Debug)]
pub struct FunctionalCheck {
    pub autodiff: Array,
    pub closed_form: Array,
    pub max_abs_err: f64,
    /// Relative to the largest closed-form component.
    pub max_rel_err: f64,
}

impl FunctionalCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks that the particle gradients of `Ψ(x₁..x_N) = U[p̂]` equal the
/// spatial gradient of the first variation at the empirical measure, scaled
/// by `1/N`.
pub fn functional_derivative_check(energy: &AnalyticEnergy, x: &Array) -> Result<FunctionalCheck> {
    if x.ndim() != 2 || x.rows() == 0 {
        return Err(Error::data("functional_derivative_check", "need an N×d cloud with N ≥ 1"));
    }
    let g = Graph::new();
    let xv = g.param(x.clone());
    let psi = energy.energy_var(xv)?;
    let grad = g.grad(psi, &[xv], popmech_autodiff::GradOptions::default().allow_unused())?[0];
    let autodiff = (*grad.value()).clone();
    let n = x.rows() as f64;
    let closed_form = energy.first_variation_gradient(x, x).map(|v| v / n);
    let max_abs_err = autodiff
        .data()
        .iter()
        .zip(closed_form.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = closed_form.max_abs().max(1e-12);
    Ok(FunctionalCheck {
        max_rel_err: max_abs_err / scale,
        autodiff,
        closed_form,
        max_abs_err,
    })
}

//! Gradient-flow SDE benchmarks `dX = −∇V(X) dt + σ dW`.

use std::f64::consts::PI;

use popmech_autodiff::Array;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{derive_seed, SnapshotDataset};
use crate::error::{Error, Result};

/// The five benchmark potentials on `ℝ²` (the sums extend to any dimension).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Potential {
    /// `10 (x₁² + 2x₂² − 0.3 cos 3πx₁ − 0.4 cos 4πx₂)`
    Bohachevsky,
    /// `5 Σ (sin xᵢ + cos xᵢ + xᵢ² + xᵢ)`
    OakleyOhagan,
    /// `5 ‖x‖²`
    Quadratic,
    /// `½ Σ (xᵢ⁴ − 16xᵢ² + 5xᵢ)`
    StyblinskiTang,
    /// `Σ (cos πxᵢ + ½xᵢ⁴ − 3xᵢ² + 1)`
    WavyPlateau,
}

impl Potential {
    pub const ALL: [Potential; 5] = [
        Potential::Bohachevsky,
        Potential::OakleyOhagan,
        Potential::Quadratic,
        Potential::StyblinskiTang,
        Potential::WavyPlateau,
    ];

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Bohachevsky => {
                10.0 * (x[0] * x[0] + 2.0 * x[1] * x[1]
                    - 0.3 * (3.0 * PI * x[0]).cos()
                    - 0.4 * (4.0 * PI * x[1]).cos())
            }
            Potential::OakleyOhagan => 5.0 * x.iter().map(|&v| v.sin() + v.cos() + v * v + v).sum::<f64>(),
            Potential::Quadratic => 5.0 * x.iter().map(|v| v * v).sum::<f64>(),
            Potential::StyblinskiTang => 0.5 * x.iter().map(|&v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>(),
            Potential::WavyPlateau => x
                .iter()
                .map(|&v| (PI * v).cos() + 0.5 * v.powi(4) - 3.0 * v * v + 1.0)
                .sum(),
        }
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Bohachevsky => {
                out[0] = 10.0 * (2.0 * x[0] + 0.9 * PI * (3.0 * PI * x[0]).sin());
                out[1] = 10.0 * (4.0 * x[1] + 1.6 * PI * (4.0 * PI * x[1]).sin());
            }
            Potential::OakleyOhagan => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = 5.0 * (v.cos() - v.sin() + 2.0 * v + 1.0);
                }
            }
            Potential::Quadratic => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = 10.0 * v;
                }
            }
            Potential::StyblinskiTang => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = 0.5 * (4.0 * v.powi(3) - 32.0 * v + 5.0);
                }
            }
            Potential::WavyPlateau => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -PI * (PI * v).sin() + 2.0 * v.powi(3) - 6.0 * v;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSpec {
    pub potential: Potential,
    pub dim: usize,
    pub sigma2: f64,
    /// Spacing between recorded marginals.
    pub dt: f64,
    pub em_substeps: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub n: usize,
    /// Variance of the isotropic Gaussian the particles start from.
    pub init_variance: f64,
    pub paired: bool,
    pub seed: u64,
}

impl Default for SdeSpec {
    fn default() -> Self {
        Self {
            potential: Potential::Quadratic,
            dim: 2,
            sigma2: 1.0,
            dt: 0.01,
            em_substeps: 10,
            num_train: 10,
            num_test: 10,
            n: 1000,
            init_variance: 0.2,
            paired: true,
            seed: 0,
        }
    }
}

impl SdeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("/sde/{f}"), m));
        if self.dim == 0 {
            return bad("dim", "must be ≥ 1");
        }
        if self.potential == Potential::Bohachevsky && self.dim != 2 {
            return bad("dim", "bohachevsky is defined on ℝ² only");
        }
        if !(self.sigma2 >= 0.0) {
            return bad("sigma2", "must be ≥ 0");
        }
        if !(self.dt > 0.0) {
            return bad("dt", "must be > 0");
        }
        if self.em_substeps == 0 {
            return bad("em_substeps", "must be ≥ 1");
        }
        if self.num_train == 0 {
            return bad("num_train", "must be ≥ 1");
        }
        if self.n == 0 {
            return bad("n", "must be ≥ 1");
        }
        if !(self.init_variance > 0.0) {
            return bad("init_variance", "must be > 0");
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.num_train + self.num_test).map(|i| i as f64 * self.dt).collect()
    }
}

/// Observed training marginals and the held-out marginals that follow them.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeData {
    pub train: SnapshotDataset,
    pub test: SnapshotDataset,
}

fn initial_cloud(spec: &SdeSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = spec.init_variance.sqrt();
    (0..spec.n * spec.dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn em_advance(spec: &SdeSpec, x: &mut [f64], steps: usize, rng: &mut ChaCha8Rng) {
    let h = spec.dt / spec.em_substeps as f64;
    let noise = (spec.sigma2 * h).sqrt();
    let d = spec.dim;
    let mut grad = vec![0.0; d];
    for _ in 0..steps {
        for p in x.chunks_exact_mut(d) {
            spec.potential.grad(p, &mut grad);
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                p[k] += -grad[k] * h + noise * z;
            }
        }
    }
}

/// Simulates the SDE with Euler–Maruyama and records `num_train + num_test`
/// marginals spaced `dt` apart, starting at `t = 0`.
///
/// Paired data follows one population through time. Unpaired data runs an
/// independent simulation for every recorded time, seeded from
/// `(seed, time index)`, and keeps only that time's cloud.
pub fn gen_sde(spec: &SdeSpec) -> Result<SdeData> {
    spec.validate()?;
    let times = spec.times();
    let mut snaps = Vec::with_capacity(times.len());
    if spec.paired {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut x = initial_cloud(spec, &mut rng);
        for i in 0..times.len() {
            if i > 0 {
                em_advance(spec, &mut x, spec.em_substeps, &mut rng);
            }
            snaps.push(Array::new(vec![spec.n, spec.dim], x.clone())?);
        }
    } else {
        for i in 0..times.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            let mut x = initial_cloud(spec, &mut rng);
            em_advance(spec, &mut x, i * spec.em_substeps, &mut rng);
            snaps.push(Array::new(vec![spec.n, spec.dim], x)?);
        }
    }
    let test_snaps = snaps.split_off(spec.num_train);
    let train = SnapshotDataset::new(times[..spec.num_train].to_vec(), snaps, None, spec.paired)?;
    let test = SnapshotDataset {
        dim: spec.dim,
        times: times[spec.num_train..].to_vec(),
        snapshots: test_snaps,
        velocities: None,
        paired: spec.paired,
    };
    test.validate()?;
    Ok(SdeData { train, test })
}

/// Velocity of the probability flow at `t = 0`:
/// `v₀(x) = −∇V(x) − (σ²/2) ∇log p₀(x)`, with the Gaussian score
/// `∇log p₀(x) = −x / init_variance`.
pub fn analytic_gf_v0(spec: &SdeSpec, x0: &Array) -> Result<Array> {
    if x0.ndim() != 2 || x0.cols() != spec.dim {
        return Err(Error::data("analytic_gf_v0", format!("expected N×{}, got {:?}", spec.dim, x0.shape())));
    }
    let mut out = Array::zeros(x0.shape().to_vec());
    let mut grad = vec![0.0; spec.dim];
    for i in 0..x0.rows() {
        let x = x0.row(i);
        spec.potential.grad(x, &mut grad);
        let row = out.row_mut(i);
        for k in 0..spec.dim {
            row[k] = -grad[k] + 0.5 * spec.sigma2 * x[k] / spec.init_variance;
        }
    }
    Ok(out)
}

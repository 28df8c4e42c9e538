//! Boids flocking with separation, alignment, cohesion and a soft boundary.

use popmech_autodiff::Array;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SnapshotDataset;
use crate::error::{Error, Result};

/// Initial positions and velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoidsInit {
    /// Centered isotropic Gaussian.
    Gaussian { std: f64, velocity_std: f64 },
    /// Equal-weight Gaussian mixture around `centers`.
    Mixture {
        centers: Vec<Vec<f64>>,
        std: f64,
        velocity_std: f64,
    },
}

impl Default for BoidsInit {
    fn default() -> Self {
        BoidsInit::Gaussian {
            std: 1.5,
            velocity_std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoidsSpec {
    pub n: usize,
    pub dim: usize,
    pub r_inner: f64,
    pub r_outer: f64,
    pub w_separation: f64,
    pub w_alignment: f64,
    pub w_cohesion: f64,
    pub w_boundary: f64,
    pub boundary_radius: f64,
    /// Simulator step.
    pub dt: f64,
    /// Simulator steps between recorded frames.
    pub steps_per_frame: usize,
    pub frames_train: usize,
    pub frames_test: usize,
    pub init: BoidsInit,
    pub seed: u64,
}

impl Default for BoidsSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            dim: 2,
            r_inner: 0.3,
            r_outer: 1.0,
            w_separation: 0.1,
            w_alignment: 0.3,
            w_cohesion: 0.005,
            w_boundary: 0.5,
            boundary_radius: 5.0,
            dt: 0.1,
            steps_per_frame: 5,
            frames_train: 50,
            frames_test: 50,
            init: BoidsInit::default(),
            seed: 0,
        }
    }
}

impl BoidsSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("/boids/{f}"), m));
        if self.n == 0 || self.dim == 0 {
            return bad("n", "n and dim must be ≥ 1");
        }
        if !(0.0 < self.r_inner && self.r_inner < self.r_outer) {
            return bad("r_inner", "need 0 < r_inner < r_outer");
        }
        let w = [self.w_separation, self.w_alignment, self.w_cohesion, self.w_boundary];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return bad("w_separation", "force weights must be ≥ 0");
        }
        if !(self.dt > 0.0) || self.steps_per_frame == 0 || self.frames_train == 0 {
            return bad("dt", "dt > 0, steps_per_frame ≥ 1 and frames_train ≥ 1 are required");
        }
        if let BoidsInit::Mixture { centers, .. } = &self.init {
            if centers.is_empty() || centers.iter().any(|c| c.len() != self.dim) {
                return bad("init/centers", "need at least one center of length dim");
            }
        }
        Ok(())
    }

    pub fn frame_interval(&self) -> f64 {
        self.dt * self.steps_per_frame as f64
    }
}

/// Accelerations of every agent.
///
/// Separation averages `(x_i − x_j)/‖x_i − x_j‖²` over neighbors closer than
/// `r_inner`; alignment and cohesion average `v_j − v_i` and `x_j − x_i`
/// over neighbors closer than `r_outer`. Outside `boundary_radius` a spring
/// pulls the agent back toward the origin.
pub fn boids_acceleration(spec: &BoidsSpec, x: &[f64], v: &[f64], out: &mut [f64]) {
    let d = spec.dim;
    let n = x.len() / d;
    let (ri2, ro2) = (spec.r_inner * spec.r_inner, spec.r_outer * spec.r_outer);
    let mut sep = vec![0.0; d];
    let mut ali = vec![0.0; d];
    let mut coh = vec![0.0; d];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let vi = &v[i * d..(i + 1) * d];
        sep.iter_mut().for_each(|s| *s = 0.0);
        ali.iter_mut().for_each(|s| *s = 0.0);
        coh.iter_mut().for_each(|s| *s = 0.0);
        let (mut n_in, mut n_out) = (0usize, 0usize);
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &x[j * d..(j + 1) * d];
            let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 < ro2 {
                n_out += 1;
                let vj = &v[j * d..(j + 1) * d];
                for k in 0..d {
                    ali[k] += vj[k] - vi[k];
                    coh[k] += xj[k] - xi[k];
                }
                if r2 < ri2 && r2 > 0.0 {
                    n_in += 1;
                    for k in 0..d {
                        sep[k] += (xi[k] - xj[k]) / r2;
                    }
                }
            }
        }
        let a = &mut out[i * d..(i + 1) * d];
        a.iter_mut().for_each(|s| *s = 0.0);
        if n_in > 0 {
            for k in 0..d {
                a[k] += spec.w_separation * sep[k] / n_in as f64;
            }
        }
        if n_out > 0 {
            for k in 0..d {
                a[k] += (spec.w_alignment * ali[k] + spec.w_cohesion * coh[k]) / n_out as f64;
            }
        }
        let r = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r > spec.boundary_radius {
            for k in 0..d {
                a[k] -= spec.w_boundary * xi[k] / r * (r - spec.boundary_radius);
            }
        }
    }
}

/// One simulator step: velocities first, then positions with the new velocities.
pub fn boids_step(spec: &BoidsSpec, x: &mut [f64], v: &mut [f64], acc: &mut [f64]) {
    boids_acceleration(spec, x, v, acc);
    for (vk, ak) in v.iter_mut().zip(acc.iter()) {
        *vk += spec.dt * ak;
    }
    for (xk, vk) in x.iter_mut().zip(v.iter()) {
        *xk += spec.dt * vk;
    }
}

/// Observed frames with velocities, then the forecast frames that follow.
#[derive(Clone, Debug, PartialEq)]
pub struct BoidsData {
    pub train: SnapshotDataset,
    pub test: SnapshotDataset,
}

fn initial_state(spec: &BoidsSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let d = spec.dim;
    let mut x = vec![0.0; spec.n * d];
    let mut v = vec![0.0; spec.n * d];
    let (std, vstd) = match &spec.init {
        BoidsInit::Gaussian { std, velocity_std } => (*std, *velocity_std),
        BoidsInit::Mixture { std, velocity_std, .. } => (*std, *velocity_std),
    };
    for i in 0..spec.n {
        let center: Vec<f64> = match &spec.init {
            BoidsInit::Gaussian { .. } => vec![0.0; d],
            BoidsInit::Mixture { centers, .. } => centers[rng.random_range(0..centers.len())].clone(),
        };
        for k in 0..d {
            x[i * d + k] = center[k] + std * rng.sample::<f64, _>(StandardNormal);
        }
        for k in 0..d {
            v[i * d + k] = vstd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (x, v)
}

/// Simulates the flock and records `frames_train + frames_test` frames,
/// `frame_interval()` apart, with the simulator's velocities.
pub fn gen_boids(spec: &BoidsSpec) -> Result<BoidsData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut x, mut v) = initial_state(spec, &mut rng);
    let mut acc = vec![0.0; x.len()];
    let frames = spec.frames_train + spec.frames_test;
    let shape = vec![spec.n, spec.dim];
    let mut xs = Vec::with_capacity(frames);
    let mut vs = Vec::with_capacity(frames);
    let mut times = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            for _ in 0..spec.steps_per_frame {
                boids_step(spec, &mut x, &mut v, &mut acc);
            }
        }
        times.push(f as f64 * spec.frame_interval());
        xs.push(Array::new(shape.clone(), x.clone())?);
        vs.push(Array::new(shape.clone(), v.clone())?);
    }
    let split = spec.frames_train;
    let all = SnapshotDataset::new(times, xs, Some(vs), true)?;
    Ok(BoidsData {
        train: all.slice(0..split),
        test: all.slice(split..frames),
    })
}

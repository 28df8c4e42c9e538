//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use popmech::datagen::SnapshotDataset;
use popmech::divergence::{DivergenceConfig, GradMode};
use popmech::energy::{Architecture, MeanFieldConfig};
use popmech::integrator::{rollout, IntegratorConfig, MechState, Scheme};
use popmech::trainer::{loss_and_grads, TrainConfig, TrainState};
use popmech::Result;
use popmech_autodiff::Array;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_cloud(n: usize, d: usize, seed: u64, half_width: f64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-half_width..half_width)).collect()).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Entropic OT between two-point uniform measures on a line. Couplings with
/// uniform marginals are `[[q, ½−q], [½−q, q]]`, so the objective
/// `⟨C, π⟩ + ε KL(π | α⊗β)` is a convex function of `q` alone and its
/// minimizer is found by bisection on the derivative.
pub fn two_point_ot(a: [f64; 2], b: [f64; 2], eps: f64) -> f64 {
    let c = |x: f64, y: f64| 0.5 * (x - y) * (x - y);
    let (c00, c01, c10, c11) = (c(a[0], b[0]), c(a[0], b[1]), c(a[1], b[0]), c(a[1], b[1]));
    let obj = |q: f64| {
        let r = 0.5 - q;
        let ent = |m: f64| if m > 0.0 { m * (4.0 * m).ln() } else { 0.0 };
        q * (c00 + c11) + r * (c01 + c10) + eps * (2.0 * ent(q) + 2.0 * ent(r))
    };
    let deriv = |q: f64| (c00 + c11) - (c01 + c10) + 2.0 * eps * (q / (0.5 - q)).ln();
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    obj(0.5 * (lo + hi))
}

/// Debiased divergence from [`two_point_ot`].
pub fn two_point_divergence(a: [f64; 2], b: [f64; 2], blur: f64) -> f64 {
    let eps = blur * blur;
    two_point_ot(a, b, eps) - 0.5 * two_point_ot(a, a, eps) - 0.5 * two_point_ot(b, b, eps)
}

/// `W₁` by trying every matching.
pub fn brute_force_w1(a: &Array, b: &Array) -> f64 {
    fn rec(a: &Array, b: &Array, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if i == a.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..b.rows() {
            if !used[j] {
                used[j] = true;
                rec(a, b, i + 1, used, acc + dist(a.row(i), b.row(j)), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(a, b, 0, &mut vec![false; b.rows()], 0.0, &mut best);
    best / a.rows() as f64
}

pub fn spring(k: f64) -> impl FnMut(&Array, f64) -> Result<Array> {
    move |x: &Array, _t: f64| Ok(x.map(|a| -k * a))
}

/// Endpoint error of an undamped ω = 2π oscillator after `periods` periods
/// against `x₀ cos ωt + (v₀/ω) sin ωt`, relative to `‖x₀‖`.
pub fn harmonic_endpoint_error(dt: f64, periods: usize) -> f64 {
    let omega = 2.0 * std::f64::consts::PI;
    let x0 = [0.7, -0.2];
    let v0 = [0.3, 1.1];
    let s0 = MechState {
        x: Array::from_rows(&[x0]).unwrap(),
        v: Array::from_rows(&[v0]).unwrap(),
        t: 0.0,
    };
    let steps = (periods as f64 / dt).round() as usize;
    let t_end = periods as f64;
    let traj = rollout(Scheme::DampedVelocityVerlet, s0, &mut spring(omega * omega), &0.0, &[t_end], steps).unwrap();
    let exact: Vec<f64> = (0..2)
        .map(|i| x0[i] * (omega * t_end).cos() + v0[i] / omega * (omega * t_end).sin())
        .collect();
    dist(traj[1].x.data(), &exact) / dist(&x0, &[0.0, 0.0])
}

/// Largest deviation, relative to `‖x₀‖`, between a γ = 10³ rollout in
/// `Ψ = mean ½(x² + 4y²)` and the gradient-descent path
/// `(x₀e^{−s}, y₀e^{−4s})`, both parameterized by arc length. Also returns
/// the rollout's arc length relative to `‖x₀‖`.
pub fn overdamped_path_deviation() -> (f64, f64) {
    let k = [1.0, 4.0];
    let mut force = |x: &Array, _t: f64| {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, q) in out.row_mut(r).iter_mut().enumerate() {
                *q *= -k[c];
            }
        }
        Ok(out)
    };
    let x0 = [1.0, 0.8];
    let boundaries: Vec<f64> = (1..=250).map(|i| 10.0 * i as f64).collect();
    let start = MechState {
        x: Array::from_rows(&[x0]).unwrap(),
        v: Array::zeros(vec![1, 2]),
        t: 0.0,
    };
    let traj = rollout(Scheme::DampedVelocityVerlet, start, &mut force, &1e3, &boundaries, 10_000).unwrap();
    let path: Vec<[f64; 2]> = traj.iter().map(|s| [s.x.data()[0], s.x.data()[1]]).collect();
    let fine: Vec<[f64; 2]> = (0..=400_000)
        .map(|i| {
            let s = i as f64 * 1e-5;
            [x0[0] * (-k[0] * s).exp(), x0[1] * (-k[1] * s).exp()]
        })
        .collect();
    let arc = |p: &[[f64; 2]]| {
        let mut acc = vec![0.0];
        for w in p.windows(2) {
            acc.push(acc.last().unwrap() + dist(&w[1], &w[0]));
        }
        acc
    };
    let (la, lf) = (arc(&path), arc(&fine));
    let scale = dist(&x0, &[0.0, 0.0]);
    let mut j = 0;
    let mut worst: f64 = 0.0;
    for (p, &l) in path.iter().zip(&la) {
        while j + 1 < lf.len() && lf[j + 1] < l {
            j += 1;
        }
        worst = worst.max(dist(p, &fine[j]) / scale);
    }
    (worst, la.last().unwrap() / scale)
}

/// Max relative error between the analytic gradient of the training loss
/// (two intervals, eight particles, the 30-parameter mean-field energy,
/// learnable γ) and central differences over every parameter and γ.
pub fn pipeline_gradient_error() -> (f64, usize) {
    let n = 8;
    let times: Vec<f64> = (0..=2).map(|i| 0.1 * i as f64).collect();
    let snaps = (0..=2)
        .map(|i| {
            let shift = Array::new(vec![n, 2], [0.3 * i as f64, -0.1 * i as f64].repeat(n)).unwrap();
            uniform_cloud(n, 2, 1, 0.5).zip_map(&shift, |a, b| a + b).unwrap()
        })
        .collect();
    let ds = SnapshotDataset::new(times, snaps, None, true).unwrap();
    let v0 = uniform_cloud(n, 2, 5, 0.5);
    let cfg = TrainConfig {
        gamma_init: 0.5,
        substeps_train: 2,
        loss: DivergenceConfig {
            max_iters: 60,
            tol: 0.0,
            grad: GradMode::Full,
            ..DivergenceConfig::default()
        }
        .with_blur(0.3),
        ..TrainConfig::default()
    };
    let integ = IntegratorConfig {
        scheme: Scheme::DampedVelocityVerlet,
        substeps: 1,
    };
    let state = TrainState::new(&Architecture::MeanField(MeanFieldConfig::default()), &cfg).unwrap();
    let rng = ChaCha8Rng::seed_from_u64(0);
    let eval = loss_and_grads(&state, &ds, &v0, 2, &cfg, &integ, &mut rng.clone()).unwrap();
    let loss_at = |s: &TrainState| loss_and_grads(s, &ds, &v0, 2, &cfg, &integ, &mut rng.clone()).unwrap().loss;
    let h = 1e-5;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    let base = state.params.arrays();
    for (t, arr) in base.iter().enumerate() {
        for i in 0..arr.len() {
            let shifted = |delta: f64| {
                let mut vals = base.clone();
                vals[t].data_mut()[i] += delta;
                TrainState {
                    params: state.params.with_values(vals).unwrap(),
                    ..state.clone()
                }
            };
            let fd = (loss_at(&shifted(h)) - loss_at(&shifted(-h))) / (2.0 * h);
            worst = worst.max(rel(fd, eval.grads[t].data()[i]));
        }
    }
    let gshift = |delta: f64| TrainState {
        gamma: state.gamma + delta,
        ..state.clone()
    };
    let fd = (loss_at(&gshift(h)) - loss_at(&gshift(-h))) / (2.0 * h);
    worst = worst.max(rel(fd, eval.grad_gamma.unwrap()));
    (worst, state.params.num_scalars())
}

/// Sample variance of one coordinate.
pub fn column_variance(x: &Array, k: usize) -> f64 {
    let n = x.rows() as f64;
    let mean = (0..x.rows()).map(|r| x.row(r)[k]).sum::<f64>() / n;
    (0..x.rows()).map(|r| (x.row(r)[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

//! Debiased Sinkhorn divergence for training and exact `W₁` for scoring.

use popmech_autodiff::{Array, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entropic length scale: a number, or `"auto"` to estimate from data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Blur {
    Value(f64),
    Auto(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Default for Blur {
    fn default() -> Self {
        Blur::Auto(AutoTag::Auto)
    }
}

/// How gradients flow through the Sinkhorn solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Every iteration is recorded and differentiated.
    #[default]
    Full,
    /// Iterate without recording, then differentiate one final update with
    /// the converged potentials held fixed.
    Envelope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    /// Cost exponent: cost is `‖x − y‖ᵖ / p`.
    pub p: u32,
    pub blur: Blur,
    pub max_iters: usize,
    pub tol: f64,
    /// Ratio between consecutive blurs while annealing from the diameter.
    pub scaling: f64,
    pub grad: GradMode,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            p: 2,
            blur: Blur::default(),
            max_iters: 200,
            tol: 1e-6,
            scaling: 0.5,
            grad: GradMode::Full,
        }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::config("/loss/p", format!("must be 1 or 2, got {}", self.p)));
        }
        if let Blur::Value(b) = self.blur {
            if !(b > 0.0) {
                return Err(Error::config("/loss/blur", "must be > 0 or \"auto\""));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::config("/loss/max_iters", "must be ≥ 1"));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::config("/loss/scaling", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// The blur, which must already be resolved to a number.
    pub fn blur_value(&self) -> Result<f64> {
        match self.blur {
            Blur::Value(b) => Ok(b),
            Blur::Auto(_) => Err(Error::config("/loss/blur", "\"auto\" must be resolved with estimate_blur first")),
        }
    }

    pub fn with_blur(mut self, blur: f64) -> Self {
        self.blur = Blur::Value(blur);
        self
    }
}

/// Solver bookkeeping for one divergence evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub converged: bool,
    pub epsilon: f64,
}

fn cost_var<'g>(a: Var<'g>, b: Var<'g>, p: u32) -> Result<Var<'g>> {
    let d2 = a.sq_dist(b)?;
    Ok(if p == 2 { d2.scale(0.5) } else { d2.clamp_min(1e-24).sqrt()? })
}

fn log_weights(w: Option<&Array>, n: usize, what: &str) -> Result<Vec<f64>> {
    match w {
        None => Ok(vec![-(n as f64).ln(); n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::data(what, format!("{} weights for {n} points", w.len())));
            }
            let s = w.sum();
            if (s - 1.0).abs() > 1e-9 || w.data().iter().any(|&v| v < 0.0) {
                return Err(Error::data(what, "weights must be nonnegative and sum to 1"));
            }
            Ok(w.data().iter().map(|v| v.ln()).collect())
        }
    }
}

/// Bounding-box diameter of the union of two clouds.
fn diameter(a: &Array, b: &Array) -> f64 {
    let d = a.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for cloud in [a, b] {
        for i in 0..cloud.rows() {
            for (k, &v) in cloud.row(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
}

/// `ε` values: geometric from `diameterᵖ` down to `blurᵖ`, ending exactly there.
fn epsilon_schedule(p: u32, diameter: f64, blur: f64, scaling: f64) -> Vec<f64> {
    let p = p as f64;
    let mut out = vec![diameter.powf(p)];
    let (start, stop, step) = (p * diameter.ln(), p * blur.ln(), p * scaling.ln());
    let mut e = start;
    while e > stop {
        out.push(e.exp());
        e += step;
    }
    out.push(blur.powf(p));
    out
}

/// `−ε log Σ_j exp(h_j − C_ij / ε)` for every row `i`.
fn softmin(eps: f64, c: &Array, h: &[f64]) -> Vec<f64> {
    let m = c.cols();
    let mut buf = vec![0.0; m];
    (0..c.rows())
        .map(|i| {
            let row = c.row(i);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                buf[j] = h[j] - row[j] / eps;
                mx = mx.max(buf[j]);
            }
            let s: f64 = buf.iter().map(|v| (v - mx).exp()).sum();
            -eps * (mx + s.ln())
        })
        .collect()
}

fn shifted(log_w: &[f64], pot: &[f64], eps: f64) -> Vec<f64> {
    log_w.iter().zip(pot).map(|(a, f)| a + f / eps).collect()
}

fn softmin_var<'g>(eps: f64, c: Var<'g>, h: Var<'g>) -> Result<Var<'g>> {
    Ok(c.scale(-1.0 / eps).add(h)?.logsumexp(1)?.scale(-eps))
}

fn max_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Potentials {
    f_ba: Vec<f64>,
    g_ab: Vec<f64>,
    f_aa: Vec<f64>,
    g_bb: Vec<f64>,
}

/// Symmetric, averaged log-domain iterations with ε-annealing, then
/// iterations at the target ε until the potentials move less than `tol`.
fn solve(
    cxy: &Array,
    cyx: &Array,
    cxx: &Array,
    cyy: &Array,
    a_log: &[f64],
    b_log: &[f64],
    schedule: &[f64],
    cfg: &DivergenceConfig,
) -> (Potentials, SinkhornReport) {
    let e0 = schedule[0];
    let mut p = Potentials {
        g_ab: softmin(e0, cyx, a_log),
        f_ba: softmin(e0, cxy, b_log),
        f_aa: softmin(e0, cxx, a_log),
        g_bb: softmin(e0, cyy, b_log),
    };
    let eps = *schedule.last().expect("schedule is nonempty");
    let mut iterations = 0;
    let mut converged = false;
    let mut k = 0;
    while iterations < cfg.max_iters {
        let e = schedule[k.min(schedule.len() - 1)];
        let ft_ba = softmin(e, cxy, &shifted(b_log, &p.g_ab, e));
        let gt_ab = softmin(e, cyx, &shifted(a_log, &p.f_ba, e));
        let ft_aa = softmin(e, cxx, &shifted(a_log, &p.f_aa, e));
        let gt_bb = softmin(e, cyy, &shifted(b_log, &p.g_bb, e));
        let avg = |old: &mut Vec<f64>, new: Vec<f64>| -> f64 {
            let next: Vec<f64> = old.iter().zip(&new).map(|(o, n)| 0.5 * (o + n)).collect();
            let d = max_change(old, &next);
            *old = next;
            d
        };
        let d = avg(&mut p.f_ba, ft_ba)
            .max(avg(&mut p.g_ab, gt_ab))
            .max(avg(&mut p.f_aa, ft_aa))
            .max(avg(&mut p.g_bb, gt_bb));
        iterations += 1;
        k += 1;
        if k >= schedule.len() && d < cfg.tol {
            converged = true;
            break;
        }
    }
    let report = SinkhornReport {
        iterations,
        converged,
        epsilon: eps,
    };
    (p, report)
}

/// Debiased Sinkhorn divergence
/// `S_ε(α, β) = OT_ε(α, β) − ½ OT_ε(α, α) − ½ OT_ε(β, β)`
/// between weighted clouds, with cost `‖x − y‖ᵖ / p` and `ε = blurᵖ`.
///
/// The result is a graph node, differentiable with respect to both clouds.
/// Weights default to uniform.
pub fn sinkhorn_divergence<'g>(
    xa: Var<'g>,
    wa: Option<&Array>,
    xb: Var<'g>,
    wb: Option<&Array>,
    cfg: &DivergenceConfig,
) -> Result<(Var<'g>, SinkhornReport)> {
    cfg.validate()?;
    let blur = cfg.blur_value()?;
    let (sa, sb) = (xa.shape(), xb.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || sa[0] == 0 || sb[0] == 0 {
        return Err(Error::data("sinkhorn_divergence", format!("incompatible clouds {sa:?} and {sb:?}")));
    }
    let g = xa.graph();
    let a_log = log_weights(wa, sa[0], "sinkhorn_divergence/wa")?;
    let b_log = log_weights(wb, sb[0], "sinkhorn_divergence/wb")?;
    let diam = diameter(&xa.value(), &xb.value()).max(blur);
    let schedule = epsilon_schedule(cfg.p, diam, blur, cfg.scaling);
    let eps = *schedule.last().expect("nonempty");

    let cxy = cost_var(xa, xb, cfg.p)?;
    let cyx = cxy.transpose()?;
    let cxx = cost_var(xa, xa, cfg.p)?;
    let cyy = cost_var(xb, xb, cfg.p)?;
    let col = |v: Vec<f64>| -> Result<Var<'g>> {
        let n = v.len();
        Ok(g.constant(Array::new(vec![n], v)?))
    };
    let (alog_v, blog_v) = (col(a_log.clone())?, col(b_log.clone())?);

    let (f_ba, g_ab, f_aa, g_bb, report) = match cfg.grad {
        GradMode::Envelope => {
            let (p, report) = solve(
                &cxy.value(),
                &cyx.value(),
                &cxx.value(),
                &cyy.value(),
                &a_log,
                &b_log,
                &schedule,
                cfg,
            );
            let (f_ba, g_ab, f_aa, g_bb) = (col(p.f_ba)?, col(p.g_ab)?, col(p.f_aa)?, col(p.g_bb)?);
            (f_ba, g_ab, f_aa, g_bb, report)
        }
        GradMode::Full => {
            let e0 = schedule[0];
            let mut g_ab = softmin_var(e0, cyx, alog_v)?;
            let mut f_ba = softmin_var(e0, cxy, blog_v)?;
            let mut f_aa = softmin_var(e0, cxx, alog_v)?;
            let mut g_bb = softmin_var(e0, cyy, blog_v)?;
            let mut iterations = 0;
            let mut converged = false;
            let mut k = 0;
            while iterations < cfg.max_iters {
                let e = schedule[k.min(schedule.len() - 1)];
                let inv = 1.0 / e;
                let ft_ba = softmin_var(e, cxy, blog_v.add(g_ab.scale(inv))?)?;
                let gt_ab = softmin_var(e, cyx, alog_v.add(f_ba.scale(inv))?)?;
                let ft_aa = softmin_var(e, cxx, alog_v.add(f_aa.scale(inv))?)?;
                let gt_bb = softmin_var(e, cyy, blog_v.add(g_bb.scale(inv))?)?;
                let next = [
                    f_ba.add(ft_ba)?.scale(0.5),
                    g_ab.add(gt_ab)?.scale(0.5),
                    f_aa.add(ft_aa)?.scale(0.5),
                    g_bb.add(gt_bb)?.scale(0.5),
                ];
                let d = [f_ba, g_ab, f_aa, g_bb]
                    .iter()
                    .zip(&next)
                    .map(|(o, n)| max_change(o.value().data(), n.value().data()))
                    .fold(0.0, f64::max);
                [f_ba, g_ab, f_aa, g_bb] = next;
                iterations += 1;
                k += 1;
                if k >= schedule.len() && d < cfg.tol {
                    converged = true;
                    break;
                }
            }
            let report = SinkhornReport {
                iterations,
                converged,
                epsilon: eps,
            };
            (f_ba, g_ab, f_aa, g_bb, report)
        }
    };

    // One last full update at the target ε. In envelope mode this is the
    // only differentiated step.
    let inv = 1.0 / eps;
    let f_ba_new = softmin_var(eps, cxy, blog_v.add(g_ab.scale(inv))?)?;
    let g_ab_new = softmin_var(eps, cyx, alog_v.add(f_ba.scale(inv))?)?;
    let f_aa_new = softmin_var(eps, cxx, alog_v.add(f_aa.scale(inv))?)?;
    let g_bb_new = softmin_var(eps, cyy, blog_v.add(g_bb.scale(inv))?)?;

    let alpha = alog_v.exp();
    let beta = blog_v.exp();
    let s = alpha
        .mul(f_ba_new.sub(f_aa_new)?)?
        .sum()
        .add(beta.mul(g_ab_new.sub(g_bb_new)?)?.sum())?;
    Ok((s, report))
}

/// [`sinkhorn_divergence`] on plain arrays, uniform weights.
pub fn sinkhorn_divergence_arrays(xa: &Array, xb: &Array, cfg: &DivergenceConfig) -> Result<(f64, SinkhornReport)> {
    let g = popmech_autodiff::Graph::new();
    let cfg = DivergenceConfig {
        grad: GradMode::Envelope,
        ..cfg.clone()
    };
    let (s, r) = sinkhorn_divergence(g.constant(xa.clone()), None, g.constant(xb.clone()), None, &cfg)?;
    Ok((s.item(), r))
}

/// Largest cloud size scored with the exact assignment solver.
pub const EXACT_W1_CAP: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1 {
    pub value: f64,
    /// False when the entropic fallback was used.
    pub exact: bool,
}

/// `W₁` between two uniform clouds, `(1/N) min_π Σ_i ‖a_i − b_{π(i)}‖`.
///
/// Equal-size clouds of at most [`EXACT_W1_CAP`] points are solved exactly
/// with a shortest-augmenting-path assignment solver. Larger or unequal
/// clouds get the transport cost of an annealed entropic plan and are
/// flagged as approximate.
pub fn exact_w1(a: &Array, b: &Array) -> Result<W1> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
        return Err(Error::data(
            "exact_w1",
            format!("incompatible clouds {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::data("exact_w1", "empty cloud"));
    }
    let cost = distance_matrix(a, b);
    if n != m || n > EXACT_W1_CAP {
        return Ok(W1 {
            value: entropic_w1(a, b, &cost),
            exact: false,
        });
    }
    let perm = assignment(&cost);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.row(i)[j]).sum();
    Ok(W1 {
        value: total / n as f64,
        exact: true,
    })
}

fn distance_matrix(a: &Array, b: &Array) -> Array {
    let (n, m) = (a.rows(), b.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            data.push(ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    Array::new(vec![n, m], data).expect("n·m entries")
}

/// Minimum-cost perfect matching on a square cost matrix: `out[i]` is the
/// column assigned to row `i`.
pub fn assignment(cost: &Array) -> Vec<usize> {
    let n = cost.rows();
    assert_eq!(n, cost.cols(), "assignment needs a square matrix");
    // Rows and columns are 1-based below; index 0 is a virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[matched[j] - 1] = j - 1;
    }
    out
}

/// Transport cost of an entropic plan, annealed geometrically by ×0.5 from
/// a tenth of the diameter down to a thousandth of it.
fn entropic_w1(a: &Array, b: &Array, cost: &Array) -> f64 {
    let (n, m) = (a.rows(), b.rows());
    let diam = diameter(a, b).max(1e-12);
    let target = 1e-3 * diam;
    let a_log = vec![-(n as f64).ln(); n];
    let b_log = vec![-(m as f64).ln(); m];
    let mut cost_t = Array::zeros(vec![m, n]);
    for i in 0..n {
        for j in 0..m {
            cost_t.row_mut(j)[i] = cost.row(i)[j];
        }
    }
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut eps = 0.1 * diam;
    loop {
        for _ in 0..20 {
            f = softmin(eps, cost, &shifted(&b_log, &g, eps));
            g = softmin(eps, &cost_t, &shifted(&a_log, &f, eps));
        }
        if eps <= target {
            break;
        }
        eps = (eps * 0.5).max(target);
    }
    let w = 1.0 / (n as f64 * m as f64);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost.row(i)[j];
            total += w * ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    total
}

/// Blur from the data: 5% of the median pairwise distance in `x`, using an
/// evenly strided subsample of at most 512 points, floored at `1e-3`.
pub fn estimate_blur(x: &Array) -> Result<f64> {
    if x.ndim() != 2 || x.rows() < 2 {
        return Err(Error::data("estimate_blur", "need a snapshot with at least 2 particles"));
    }
    let n = x.rows();
    let m = n.min(512);
    let idx: Vec<usize> = (0..m).map(|k| k * n / m).collect();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            d.push(x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let med = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    Ok((0.05 * med).max(1e-3))
}

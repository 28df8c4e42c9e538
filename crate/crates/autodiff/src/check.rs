//! Central finite-difference gradient checking.

use crate::array::Array;
use crate::error::Result;
use crate::graph::{GradOptions, Graph, Var};

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<Array>,
    pub numeric: Vec<Array>,
    /// Largest componentwise `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Options for [`check_grad`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so components whose
    /// true value is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-8,
        }
    }
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central finite differences with the given step.
pub fn check_grad<F>(f: F, point: &[Array], opts: GradCheck) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = point.iter().map(|a| g.param(a.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.grad(out, &vars, GradOptions::default().allow_unused())?;
        grads.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>()
    };

    let eval = |pt: &[Array]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = pt.iter().map(|a| g.constant(a.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut work: Vec<Array> = point.to_vec();
    for k in 0..point.len() {
        let mut num = Array::zeros(point[k].shape().to_vec());
        for i in 0..point[k].len() {
            let x0 = point[k].data()[i];
            work[k].data_mut()[i] = x0 + opts.step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - opts.step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            num.data_mut()[i] = (fp - fm) / (2.0 * opts.step);
        }
        numeric.push(num);
    }

    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let abs = (x - y).abs();
            let denom = x.abs().max(y.abs()).max(opts.floor);
            max_abs_err = max_abs_err.max(abs);
            max_rel_err = max_rel_err.max(abs / denom);
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        max_abs_err,
        tolerance: opts.tolerance,
    })
}

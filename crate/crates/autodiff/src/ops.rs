//! Differentiable operations on [`Var`] and their derivative recipes.
//!
//! Every recipe is written in terms of other `Var` operations, so a backward
//! pass run while recording is itself differentiable.

use crate::array::{self, axis_split, broadcastable, Array};
use crate::error::{AutodiffError, Result};
use crate::graph::Var;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul { ta: bool, tb: bool },
    Transpose,
    Reshape,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    SumAll,
    SumAxis { axis: usize, keepdim: bool },
    BroadcastTo,
    SumTo,
    Exp,
    Log,
    Pow(f64),
    Sqrt,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    LogSumExp { axis: usize },
    ClampMin(f64),
    SqDist,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'g> Var<'g> {
    fn unary(self, op: Op, value: Array) -> Var<'g> {
        self.graph.push(value, op, &[self])
    }

    /// Brings two operands to a common shape. Accepts identical shapes, a
    /// single-element operand of no higher rank, or one shape being a
    /// suffix of the other.
    fn coerce(self, other: Var<'g>, op: &'static str) -> Result<(Var<'g>, Var<'g>)> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return Ok((self, other));
        }
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        let suffix = |short: &[usize], long: &[usize]| {
            short.len() < long.len() && long.ends_with(short)
        };
        if (nb == 1 && sb.len() <= sa.len()) || suffix(&sb, &sa) {
            Ok((self, other.broadcast_to(&sa)?))
        } else if (na == 1 && sa.len() <= sb.len()) || suffix(&sa, &sb) {
            Ok((self.broadcast_to(&sb)?, other))
        } else {
            Err(mismatch(op, &sa, &sb))
        }
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        let (a, b) = self.coerce(other, name)?;
        let value = a.value().zip_map(&b.value(), f)?;
        Ok(a.graph.push(value, op, &[a, b]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn neg(self) -> Var<'g> {
        let v = self.value().map(|x| -x);
        self.unary(Op::Neg, v)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| c * x);
        self.unary(Op::Scale(c), v)
    }

    /// Adds a constant.
    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar, v)
    }

    fn matmul_with(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let value = array::matmul(&self.value(), &other.value(), ta, tb)?;
        Ok(self.graph.push(value, Op::MatMul { ta, tb }, &[self, other]))
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_with(other, false, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_with(other, false, true)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_with(other, true, false)
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a 2-D array, got shape {:?}", a.shape()),
            });
        }
        let v = array::transpose(&a);
        Ok(self.unary(Op::Transpose, v))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(Op::Reshape, v))
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in values.iter().zip(&sizes) {
                let block = n * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Array::new(shape, data)?;
        Ok(first.graph.push(value, Op::Concat { axis, sizes }, parts))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let v = Array::new(out_shape, data)?;
        Ok(self.unary(Op::Slice { axis, start }, v))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'g> {
        let v = Array::scalar(self.value().sum());
        self.unary(Op::SumAll, v)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let v = Array::new(reduced_shape(shape, axis, keepdim), data)?;
        Ok(self.unary(Op::SumAxis { axis, keepdim }, v))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Explicit numpy-style broadcast to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        if !broadcastable(a.shape(), shape) {
            return Err(mismatch("broadcast", a.shape(), shape));
        }
        let v = array::broadcast_to(&a, shape);
        Ok(self.unary(Op::BroadcastTo, v))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() == shape {
            return Ok(self);
        }
        if !broadcastable(shape, a.shape()) {
            return Err(mismatch("sum_to", a.shape(), shape));
        }
        let v = array::sum_to(&a, shape);
        Ok(self.unary(Op::SumTo, v))
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(Op::Exp, v)
    }

    /// Natural logarithm; negative inputs are a domain error.
    pub fn ln(self) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(x) = a.data().iter().find(|x| **x < 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                msg: format!("negative input {x}"),
            });
        }
        let v = a.map(f64::ln);
        Ok(self.unary(Op::Log, v))
    }

    /// Elementwise power with a constant exponent. Negative bases are only
    /// accepted for integer exponents.
    pub fn powf(self, p: f64) -> Result<Var<'g>> {
        let a = self.value();
        if p.fract() != 0.0 {
            if let Some(x) = a.data().iter().find(|x| **x < 0.0) {
                return Err(AutodiffError::Domain {
                    op: "power",
                    msg: format!("negative base {x} with exponent {p}"),
                });
            }
        }
        let v = if p == 2.0 {
            a.map(|x| x * x)
        } else {
            a.map(|x| x.powf(p))
        };
        Ok(self.unary(Op::Pow(p), v))
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().map(|x| x * x);
        self.unary(Op::Pow(2.0), v)
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(x) = a.data().iter().find(|x| **x < 0.0) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                msg: format!("negative input {x}"),
            });
        }
        let v = a.map(f64::sqrt);
        Ok(self.unary(Op::Sqrt, v))
    }

    pub fn tanh(self) -> Var<'g> {
        let v = self.value().map(f64::tanh);
        self.unary(Op::Tanh, v)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().map(sigmoid);
        self.unary(Op::Sigmoid, v)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'g>> {
        self.mul(self.sigmoid())
    }

    /// `max(x, lo)`; the derivative is zero where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        let v = self.value().map(|x| x.max(lo));
        self.unary(Op::ClampMin(lo), v)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("softmax", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let mut out = vec![0.0; a.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| a.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (a.data()[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[idx(k)] /= s;
                }
            }
        }
        let v = Array::new(a.shape().to_vec(), out)?;
        Ok(self.unary(Op::Softmax { axis }, v))
    }

    /// `log Σ exp(x)` along `axis`, shifted by the maximum for stability.
    /// The reduced axis is removed.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("logsumexp", a.shape(), axis)?;
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| a.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..n).map(|k| (a.data()[idx(k)] - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let v = Array::new(reduced_shape(a.shape(), axis, false), out)?;
        Ok(self.unary(Op::LogSumExp { axis }, v))
    }

    /// Normalizes over the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g>> {
        let axis = self.shape().len().checked_sub(1).ok_or(AutodiffError::InvalidArgument {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let mu = self.mean_axis(axis, true)?;
        let centered = self.sub(mu.broadcast_to(&self.shape())?)?;
        let var = centered.square().mean_axis(axis, true)?;
        let inv = var.add_scalar(eps).powf(-0.5)?;
        centered.mul(inv.broadcast_to(&self.shape())?)
    }

    /// Pairwise squared Euclidean distances between the rows of two
    /// matrices: `out[i, j] = ‖self_i − other_j‖²`.
    pub fn sq_dist(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
            return Err(mismatch("sq_dist", a.shape(), b.shape()));
        }
        let (n, m) = (a.rows(), b.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = a.row(i);
            for j in 0..m {
                out[i * m + j] = ai
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let v = Array::new(vec![n, m], out)?;
        Ok(self.graph.push(v, Op::SqDist, &[self, other]))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Op {
    /// Gradients of the inputs given the output gradient `g`.
    pub(crate) fn backward<'g>(
        &self,
        inputs: &[Var<'g>],
        out: Var<'g>,
        g: Var<'g>,
        need: &[bool],
    ) -> Result<Vec<Option<Var<'g>>>> {
        let one = |v: Result<Var<'g>>| -> Result<Vec<Option<Var<'g>>>> { Ok(vec![Some(v?)]) };
        match self {
            Op::Leaf => Ok(vec![]),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![Some(g), Some(g.neg())]),
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                Ok(vec![
                    if need[0] { Some(g.mul(b)?) } else { None },
                    if need[1] { Some(g.mul(a)?) } else { None },
                ])
            }
            Op::Div => {
                let b = inputs[1];
                let ga = g.div(b)?;
                Ok(vec![
                    Some(ga),
                    if need[1] { Some(ga.mul(out)?.neg()) } else { None },
                ])
            }
            Op::Neg => Ok(vec![Some(g.neg())]),
            Op::Scale(c) => Ok(vec![Some(g.scale(*c))]),
            Op::AddScalar => Ok(vec![Some(g)]),
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if !need[0] {
                    None
                } else if !*ta {
                    Some(g.matmul_with(b, false, !*tb)?)
                } else {
                    Some(b.matmul_with(g, *tb, true)?)
                };
                let gb = if !need[1] {
                    None
                } else if !*tb {
                    Some(a.matmul_with(g, !*ta, false)?)
                } else {
                    Some(g.matmul_with(a, true, *ta)?)
                };
                Ok(vec![ga, gb])
            }
            Op::Transpose => one(g.transpose()),
            Op::Reshape => one(g.reshape(&inputs[0].shape())),
            Op::Concat { axis, sizes } => {
                let mut start = 0;
                let mut res = Vec::with_capacity(sizes.len());
                for (&n, &nd) in sizes.iter().zip(need) {
                    res.push(if nd { Some(g.slice(*axis, start, n)?) } else { None });
                    start += n;
                }
                Ok(res)
            }
            Op::Slice { axis, start } => {
                let full = inputs[0].shape();
                let len = g.shape()[*axis];
                let graph = g.graph();
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    let mut s = full.clone();
                    s[*axis] = *start;
                    parts.push(graph.constant(Array::zeros(s)));
                }
                parts.push(g);
                let rest = full[*axis] - start - len;
                if rest > 0 {
                    let mut s = full.clone();
                    s[*axis] = rest;
                    parts.push(graph.constant(Array::zeros(s)));
                }
                one(Var::concat(&parts, *axis))
            }
            Op::SumAll => one(g.broadcast_to(&inputs[0].shape())),
            Op::SumAxis { axis, keepdim } => {
                let shape = inputs[0].shape();
                let g = if *keepdim {
                    g
                } else {
                    g.reshape(&reduced_shape(&shape, *axis, true))?
                };
                one(g.broadcast_to(&shape))
            }
            Op::BroadcastTo => one(g.sum_to(&inputs[0].shape())),
            Op::SumTo => one(g.broadcast_to(&inputs[0].shape())),
            Op::Exp => one(g.mul(out)),
            Op::Log => one(g.div(inputs[0])),
            Op::Pow(p) => {
                let p = *p;
                if p == 0.0 {
                    return Ok(vec![None]);
                }
                let d = if p == 2.0 {
                    inputs[0].scale(2.0)
                } else if p == 1.0 {
                    return Ok(vec![Some(g)]);
                } else {
                    inputs[0].powf(p - 1.0)?.scale(p)
                };
                one(g.mul(d))
            }
            Op::Sqrt => Ok(vec![Some(g.div(out)?.scale(0.5))]),
            Op::Tanh => {
                let d = out.square().neg().add_scalar(1.0);
                one(g.mul(d))
            }
            Op::Sigmoid => {
                let d = out.mul(out.neg().add_scalar(1.0))?;
                one(g.mul(d))
            }
            Op::Softmax { axis } => {
                let shape = out.shape();
                let s = g.mul(out)?.sum_axis(*axis, true)?.broadcast_to(&shape)?;
                one(g.sub(s)?.mul(out))
            }
            Op::LogSumExp { axis } => {
                let shape = inputs[0].shape();
                let sm = inputs[0].softmax(*axis)?;
                let gk = g
                    .reshape(&reduced_shape(&shape, *axis, true))?
                    .broadcast_to(&shape)?;
                one(gk.mul(sm))
            }
            Op::ClampMin(lo) => {
                let lo = *lo;
                let mask = inputs[0].value().map(|x| if x > lo { 1.0 } else { 0.0 });
                let mask = g.graph().constant(mask);
                one(g.mul(mask))
            }
            Op::SqDist => {
                // d/dA = 2 (rowsum(G) ⊙ A − G·B), d/dB = 2 (colsum(G) ⊙ B − Gᵀ·A)
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if need[0] {
                    let rs = g.sum_axis(1, true)?.broadcast_to(&a.shape())?;
                    Some(rs.mul(a)?.sub(g.matmul(b)?)?.scale(2.0))
                } else {
                    None
                };
                let gb = if need[1] {
                    let cs = g
                        .sum_axis(0, false)?
                        .reshape(&[b.shape()[0], 1])?
                        .broadcast_to(&b.shape())?;
                    Some(cs.mul(b)?.sub(g.t_matmul(a)?)?.scale(2.0))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
        }
    }
}

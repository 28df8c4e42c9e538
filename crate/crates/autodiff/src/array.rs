//! Dense row-major `f64` arrays and the raw kernels the graph ops are built on.

use crate::error::{AutodiffError, Result};

/// A dense, row-major array of `f64` values.
///
/// The product of `shape` always equals `data.len()`. A shape of `[]` is a
/// scalar holding exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// Builds an `rows x cols` matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AutodiffError::InvalidArgument {
                    op: "from_rows",
                    msg: format!("ragged rows: expected {cols} columns, found {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows of a 2-D array (or the leading extent in general).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a 2-D array (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two arrays of identical shape.
    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Permutes the rows of a 2-D array: row `i` of the result is row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(&self.data[p * c..(p + 1) * c]);
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if let Some(first) = shape.first_mut() {
            *first = idx.len();
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &p in idx {
            data.extend_from_slice(&self.data[p * c..(p + 1) * c]);
        }
        Self { shape, data }
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Whether `from` can be broadcast to `to` with numpy alignment rules.
pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let off = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &f)| f == to[off + i] || f == 1)
}

/// Materializes `a` broadcast to shape `to`.
pub(crate) fn broadcast_to(a: &Array, to: &[usize]) -> Array {
    let n: usize = to.iter().product();
    if a.shape == to {
        return a.clone();
    }
    if a.data.len() == 1 {
        return Array::full(to.to_vec(), a.data[0]);
    }
    let off = to.len() - a.shape.len();
    // Source strides aligned with the target, zero on broadcast axes.
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for i in (0..a.shape.len()).rev() {
        if a.shape[i] != 1 {
            src_strides[off + i] = stride;
        }
        stride *= a.shape[i];
    }
    let mut out = Vec::with_capacity(n);
    let inner = *to.last().unwrap_or(&1);
    let inner_stride = *src_strides.last().unwrap_or(&0);
    let outer_dims = &to[..to.len().saturating_sub(1)];
    let mut idx = vec![0usize; outer_dims.len()];
    let blocks = n / inner.max(1);
    for _ in 0..blocks {
        let base: usize = idx
            .iter()
            .zip(&src_strides)
            .map(|(&i, &s)| i * s)
            .sum();
        if inner_stride == 0 {
            out.extend(std::iter::repeat(a.data[base]).take(inner));
        } else {
            out.extend_from_slice(&a.data[base..base + inner]);
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < outer_dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array {
        shape: to.to_vec(),
        data: out,
    }
}

/// Sums `a` down to shape `to`; the inverse reduction of [`broadcast_to`].
pub(crate) fn sum_to(a: &Array, to: &[usize]) -> Array {
    if a.shape == to {
        return a.clone();
    }
    let n_to: usize = to.iter().product();
    if n_to == 1 {
        return Array {
            shape: to.to_vec(),
            data: vec![a.sum()],
        };
    }
    let off = a.shape.len() - to.len();
    let mut dst_strides = vec![0usize; a.shape.len()];
    let mut stride = 1;
    for i in (0..to.len()).rev() {
        if to[i] != 1 {
            dst_strides[off + i] = stride;
        }
        stride *= to[i];
    }
    let mut out = vec![0.0; n_to];
    let mut idx = vec![0usize; a.shape.len()];
    for &v in &a.data {
        let pos: usize = idx.iter().zip(&dst_strides).map(|(&i, &s)| i * s).sum();
        out[pos] += v;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < a.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Array {
        shape: to.to_vec(),
        data: out,
    }
}

/// `op(a) · op(b)` for 2-D arrays, where `op` optionally transposes.
pub(crate) fn matmul(a: &Array, b: &Array, ta: bool, tb: bool) -> Result<Array> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: the strides above describe the row-major buffers of `a` and
        // `b` (optionally transposed) and `out` is an m x n row-major buffer.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Array::new(vec![m, n], out)
}

pub(crate) fn transpose(a: &Array) -> Array {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Array {
        shape: vec![c, r],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_column_and_sum_back() {
        let a = Array::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = broadcast_to(&a, &[2, 3]);
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = sum_to(&b, &[2, 1]);
        assert_eq!(s.data(), &[3.0, 6.0]);
    }

    #[test]
    fn broadcast_leading_axis() {
        let a = Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = broadcast_to(&a, &[2, 3]);
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(sum_to(&b, &[3]).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(sum_to(&b, &[]).data(), &[12.0]);
    }

    #[test]
    fn matmul_transposes() {
        let a = Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array::new(vec![2, 3], vec![1., 0., 1., 0., 1., 0.]).unwrap();
        let abt = matmul(&a, &b, false, true).unwrap();
        assert_eq!(abt.shape(), &[2, 2]);
        assert_eq!(abt.data(), &[4., 2., 10., 5.]);
        let atb = matmul(&a, &b, true, false).unwrap();
        assert_eq!(atb.shape(), &[3, 3]);
        assert_eq!(atb.data(), &[1., 4., 1., 2., 5., 2., 3., 6., 3.]);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Array::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}

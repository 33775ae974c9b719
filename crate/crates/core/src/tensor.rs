//! Dense row-major `f64` tensors and the handful of matrix kernels the
//! layer set needs.

use std::fmt;

use crate::error::{AmssError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AmssError::Tensor(format!(
                "shape {shape:?} must have at least one dimension and no zero sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AmssError::Tensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AmssError::Tensor("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(AmssError::Shape {
                layer: op.to_string(),
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `x · wᵀ` for `x: B×in`, `w: out×in`.
    pub fn matmul_nt(&self, w: &Tensor) -> Result<Self> {
        let (b, inp) = (self.rows(), self.cols());
        let (out, w_in) = (w.rows(), w.cols());
        if inp != w_in {
            return Err(AmssError::Shape {
                layer: "matmul_nt".into(),
                expected: vec![b, w_in],
                actual: self.shape.clone(),
            });
        }
        let mut y = vec![0.0; b * out];
        for i in 0..b {
            let xi = self.row(i);
            for o in 0..out {
                y[i * out + o] = dot(xi, w.row(o));
            }
        }
        Self::matrix(b, out, y)
    }

    /// `δᵀ · a` for `δ: B×out`, `a: B×in`; yields `out×in`.
    pub fn matmul_tn(&self, a: &Tensor) -> Result<Self> {
        let (b, out) = (self.rows(), self.cols());
        let inp = a.cols();
        if a.rows() != b {
            return Err(AmssError::Shape {
                layer: "matmul_tn".into(),
                expected: vec![b, inp],
                actual: a.shape.clone(),
            });
        }
        let mut g = vec![0.0; out * inp];
        for i in 0..b {
            let di = self.row(i);
            let ai = a.row(i);
            for (o, &d) in di.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let gr = &mut g[o * inp..(o + 1) * inp];
                for (gv, &av) in gr.iter_mut().zip(ai) {
                    *gv += d * av;
                }
            }
        }
        Self::matrix(out, inp, g)
    }

    /// `δ · w` for `δ: B×out`, `w: out×in`; yields `B×in`.
    pub fn matmul_nn(&self, w: &Tensor) -> Result<Self> {
        let (b, out) = (self.rows(), self.cols());
        let inp = w.cols();
        if w.rows() != out {
            return Err(AmssError::Shape {
                layer: "matmul_nn".into(),
                expected: vec![out, inp],
                actual: w.shape.clone(),
            });
        }
        let mut y = vec![0.0; b * inp];
        for i in 0..b {
            let di = self.row(i);
            let yr = &mut y[i * inp..(i + 1) * inp];
            for (o, &d) in di.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (yv, &wv) in yr.iter_mut().zip(w.row(o)) {
                    *yv += d * wv;
                }
            }
        }
        Self::matrix(b, inp, y)
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row_vector(&mut self, bias: &Tensor) -> Result<()> {
        let c = self.cols();
        if bias.len() != c {
            return Err(AmssError::Shape {
                layer: "add_row_vector".into(),
                expected: vec![c],
                actual: bias.shape.clone(),
            });
        }
        for row in self.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut s = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (a, v) in s.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor {
            shape: vec![c],
            data: s,
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let b = parts.first().map_or(0, |t| t.rows());
        if parts.iter().any(|t| t.rows() != b) {
            return Err(AmssError::Tensor("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(b * total);
        for i in 0..b {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Self::matrix(b, total, data)
    }

    /// Inverse of [`Tensor::concat_cols`].
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Self>> {
        if widths.iter().sum::<usize>() != self.cols() {
            return Err(AmssError::Tensor(format!(
                "split_cols: widths {widths:?} do not sum to {}",
                self.cols()
            )));
        }
        let b = self.rows();
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            let mut data = Vec::with_capacity(b * w);
            for i in 0..b {
                data.extend_from_slice(&self.row(i)[start..start + w]);
            }
            out.push(Self::matrix(b, w, data)?);
            start += w;
        }
        Ok(out)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= self.rows() {
                return Err(AmssError::Tensor(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// `ln Σ exp(x)` computed stably.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn matmul_kernels_agree_with_hand_values() {
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let w = Tensor::matrix(2, 3, vec![1., 0., -1., 0.5, 0.5, 0.5]).unwrap();
        let y = x.matmul_nt(&w).unwrap();
        assert_eq!(y.data(), &[-2.0, 3.0, -2.0, 7.5]);

        let d = Tensor::matrix(2, 2, vec![1., 0., 0., 2.]).unwrap();
        let g = d.matmul_tn(&x).unwrap();
        assert_eq!(g.data(), &[1., 2., 3., 8., 10., 12.]);

        let back = d.matmul_nn(&w).unwrap();
        assert_eq!(back.data(), &[1., 0., -1., 1., 1., 1.]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_logits() {
        let t = Tensor::matrix(2, 3, vec![1000., 1001., 1002., -5., 0., 5.]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(s.is_finite());
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::matrix(2, 1, vec![1., 2.]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let parts = c.split_cols(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }
}

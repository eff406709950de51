//! Dense row-major `f64` tensors and the value-level kernels the graph builds on.
//!
//! Sequences are stored time-major: a feature sequence with `C` channels and
//! `T` steps is a `[T, C]` tensor, so each row is one time step and every
//! per-position operation (layer norm, linear maps, softmax) runs along the
//! last axis.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

impl Tensor {
    /// Checked constructor: the element count must match the shape and every
    /// value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] but accepts non-finite values.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self::raw(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[len / last_dim, last_dim]`.
    pub fn outer(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self::raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::raw(vec![n, m], out))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::raw(vec![m, n], out))
    }

    /// Softmax along the last axis. Masked-out entries (`mask[i] == false`)
    /// are exactly zero in the output.
    pub fn softmax_lastdim(&self, mask: Option<&[bool]>) -> Result<Self> {
        if let Some(m) = mask {
            if m.len() != self.data.len() {
                return Err(Error::Shape {
                    op: "softmax_lastdim",
                    lhs: self.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let c = self.last_dim();
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.outer() {
            let span = r * c..(r + 1) * c;
            let keep = |j: usize| mask.map_or(true, |m| m[span.start + j]);
            softmax_row(&self.data[span.clone()], &mut out[span.clone()], keep)
                .ok_or(Error::DegenerateRow { row: r })?;
        }
        Ok(Self::raw(self.shape.clone(), out))
    }

    /// Per-position normalization over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Self> {
        let c = self.last_dim();
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.outer() {
            let x = &self.data[r * c..(r + 1) * c];
            let (mean, inv_std) = moments(x, eps);
            for j in 0..c {
                out[r * c + j] = (x[j] - mean) * inv_std * gamma.data[j] + beta.data[j];
            }
        }
        Ok(Self::raw(self.shape.clone(), out))
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }
}

/// Row-major `out += a[m,k] * b[k,n]`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major `out += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Row-major `out += a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Max-subtracted softmax over the entries of `x` selected by `keep`;
/// returns `None` when nothing is selected.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64], keep: impl Fn(usize) -> bool) -> Option<()> {
    let max = (0..x.len())
        .filter(|&j| keep(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for j in 0..x.len() {
        out[j] = if keep(j) { (x[j] - max).exp() } else { 0.0 };
        total += out[j];
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Some(())
}

/// Mean and `1 / sqrt(var + eps)` with population variance.
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_fixtures() {
        let i2 = Tensor::identity(2);
        assert_eq!(i2.matmul(&i2).unwrap(), i2);

        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&i2).unwrap(), a);

        let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[4, 4], -2.0, 2.0, &mut rng)).collect();
            let left = m[0].matmul(&m[1]).unwrap().matmul(&m[2]).unwrap().matmul(&m[3]).unwrap();
            let right = m[0].matmul(&m[1].matmul(&m[2].matmul(&m[3]).unwrap()).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn gemm_variants_agree_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let mut nt = vec![0.0; 12];
        gemm_nt(a.data(), b.data(), &mut nt, 3, 5, 4);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(Tensor::raw(vec![3, 4], nt).max_abs_diff(&expect) < 1e-12);

        let c = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut tn = vec![0.0; 20];
        gemm_tn(a.data(), c.data(), &mut tn, 5, 3, 4);
        let expect = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(Tensor::raw(vec![5, 4], tn).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_fixtures() {
        let s = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax_lastdim(None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap().softmax_lastdim(None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap().softmax_lastdim(None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_mask_and_degenerate_row() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let mask = [true, false, true, false, false, false];
        assert!(matches!(
            x.softmax_lastdim(Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
        let mask = [true, false, true, false, true, false];
        let s = x.softmax_lastdim(Some(&mask)).unwrap();
        assert_eq!(s.at(0, 1), 0.0);
        assert_eq!(s.at(1, 0), 0.0);
        assert_eq!(s.at(1, 1), 1.0);
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_fixtures() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::new(vec![1, 2], vec![7.0, 7.0]).unwrap();
        assert_eq!(c.layer_norm(&ones, &zeros, 1e-5).unwrap().data(), &[0.0, 0.0]);

        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y = x.layer_norm(&ones, &zeros, 1e-300).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let y = x.layer_norm(&zeros, &Tensor::full(&[2], 5.0), 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
        assert!(x.layer_norm(&ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn gelu_fixtures() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(40.0) - 40.0).abs() < 1e-12);
        // Phi(1) by composite Simpson quadrature of the standard normal density.
        let n = 20_000;
        let (a, b) = (-12.0f64, 1.0f64);
        let h = (b - a) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(a) + pdf(b);
        for i in 1..n {
            acc += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let phi1 = acc * h / 3.0;
        assert!((gelu(1.0) - phi1).abs() < 1e-10);
        assert!((gelu(1.0) - 0.8413).abs() < 1e-4);
    }

    #[test]
    fn checked_constructor_rejects_bad_input() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}

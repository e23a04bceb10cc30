//! Dense row-major `f64` tensors and the scalar kernels shared by the
//! autodiff graph and the plain-value APIs.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: String },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A shaped array of 64-bit reals stored in row-major order.
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
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(TensorError::Empty { op: "from_rows" });
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    expected: vec![c],
                    got: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![r, c], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, data.len()], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
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

    /// Number of rows when viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// View as a 2-D matrix `[rows, last]`.
    pub fn as_matrix(&self) -> Self {
        Self {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op: op.to_string() })
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, m],
                got: vec![k2, m],
            });
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(false, false, n, k, m, &self.data, &other.data, 0.0, &mut out.data);
        Ok(out)
    }
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `n×k` and `op(b)` is `k×m`.
/// Transposed operands are read in place from their row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    let (rsa, csa) = if trans_a { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (m as isize, 1) };
    // SAFETY: strides describe the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Strided matrix view: element `(r, c)` lives at `offset + r·rs + c·cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major `cols`-wide matrix.
    pub fn dense(cols: usize) -> Self {
        Self { offset: 0, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major `cols`-wide matrix.
    pub fn dense_t(cols: usize) -> Self {
        Self { offset: 0, rs: 1, cs: cols }
    }

    /// Columns `offset..` of a row-major `cols`-wide matrix.
    pub fn col_block(cols: usize, offset: usize) -> Self {
        Self { offset, rs: cols, cs: 1 }
    }

    /// Transpose of [`View::col_block`].
    pub fn col_block_t(cols: usize, offset: usize) -> Self {
        Self { offset, rs: 1, cs: cols }
    }

    fn check(&self, len: usize, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            assert!(self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < len, "view out of bounds");
        }
    }
}

/// `c ← alpha·a·b + beta·c` over strided views (`a` is `n×k`, `b` is `k×m`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    n: usize,
    k: usize,
    m: usize,
    alpha: f64,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    va.check(a.len(), n, k);
    vb.check(b.len(), k, m);
    vc.check(c.len(), n, m);
    if n == 0 || m == 0 {
        return;
    }
    // SAFETY: every addressed element was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(TensorError::Empty { op: "softmax" });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "softmax".into(),
        });
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes one token vector to zero mean and unit population variance,
/// then applies the affine `gamma`/`beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(TensorError::Empty { op: "layer_norm" });
    }
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            expected: vec![x.len()],
            got: vec![gamma.len(), beta.len()],
        });
    }
    let (xhat, _) = normalize(x, epsilon);
    Ok(xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| g * h + b)
        .collect())
}

/// Returns `(x_hat, 1/sqrt(var + eps))`; a zero denominator yields zeros.
pub(crate) fn normalize(x: &[f64], epsilon: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + epsilon).sqrt();
    let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    gelu_grad_from_tanh(x, u.tanh())
}

/// GELU value and derivative sharing one `tanh` evaluation.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * x * (1.0 + t), gelu_grad_from_tanh(x, t))
}

fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(TensorError::OutOfRange {
            op: "cross_entropy",
            index: target,
            extent: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "cross_entropy".into(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn layer_norm_standardizes(v in prop::collection::vec(-10.0f64..10.0, 2..16)) {
            let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - v.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let ones = vec![1.0; v.len()];
            let zeros = vec![0.0; v.len()];
            let y = layer_norm(&v, &ones, &zeros, 0.0).unwrap();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_random_five_vector_sums_to_one() {
        let v = [0.3, -1.7, 2.2, 0.0, 5.1];
        let s: f64 = softmax(&v).unwrap().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        let y = layer_norm(&[3.0; 4], &ones, &zeros, 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[3.0; 4], &ones, &zeros, 0.0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));

        let y = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);

        let x = [0.5, -2.0, 1.25, 4.0];
        let base = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        let shifted = layer_norm(&x, &ones, &[2.0; 4], 1e-5).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((b - a - 2.0).abs() < 1e-15);
        }
        assert!(layer_norm(&[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let ce = cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap();
        assert!(ce < 1e-20);

        let e = std::f64::consts::E;
        let oracle = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        let ce = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((ce - oracle).abs() < 1e-14);

        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(TensorError::OutOfRange { .. })
        ));
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0], vec![2.0, 3.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[8.0, 7.0, 18.5, 13.0]);

        let mut ct = vec![0.0; 4];
        gemm(false, true, 2, 3, 2, a.data(), b.transpose().data(), 0.0, &mut ct);
        assert_eq!(ct, c.data());
        let mut at = vec![0.0; 4];
        gemm(true, false, 2, 3, 2, a.transpose().data(), b.data(), 0.0, &mut at);
        assert_eq!(at, c.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

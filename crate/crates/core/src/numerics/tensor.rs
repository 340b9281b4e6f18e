use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NumericsError;

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples every entry from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().expect("row() on a 0-d tensor");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), NumericsError> {
        if grad.len() != self.data.len() {
            return Err(NumericsError::DataLength { shape: self.shape.clone(), len: grad.len() });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::DataLength { shape, len: self.data.len() });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Maximum absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and values (grad state ignored).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out += a · b` for row-major `a: [m×k]`, `b: [k×n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
        return Err(NumericsError::Shape {
            op: "matmul",
            shapes: vec![a.shape.clone(), b.shape.clone()],
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= s;
    }
    out
}

pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn identity_matmul_is_identity() {
        let m = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let out = matmul(&Tensor::identity(3), &m).unwrap();
        assert!(out.bitwise_eq(&m));
    }

    #[test]
    fn logsumexp_handles_large_values() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}

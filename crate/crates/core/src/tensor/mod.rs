//! Dense row-major tensors over f32/f64 and a reverse-mode autodiff tape.
//!
//! f64 is the verification dtype (gradient checks, oracle comparisons),
//! f32 the training default. Storage is dense and row-major; there are no
//! views or strides. Every primitive fails fast on non-finite outputs
//! instead of letting NaN/Inf propagate through a training run.

mod conv;
pub mod gradcheck;
mod tape;

pub use tape::{Tape, Var};

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Element dtype tag, recorded in checkpoint files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element type: f32 for training, f64 for verification.
pub trait Element:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// IEEE total order, used for order-canonical summation.
    fn total_ord(&self, other: &Self) -> Ordering;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn total_ord(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn total_ord(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense n-dimensional array. `grad`, when allocated, mirrors `data`'s shape
/// and accumulates across backward passes until the caller zeroes it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Invalid(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar_value(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value]).unwrap()
    }

    /// Per-element uniform draw from `[lo, hi)`, consumed in row-major order.
    pub fn rand_uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor::from_vec(shape, data).expect("rand_uniform: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a trainable leaf and allocates its grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the grad buffer (gradients accumulate between zeroing).
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "grad length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                op: "scalar",
                shape: self.shape.clone(),
            })
        }
    }

    /// Row-major element lookup, for tests and small hand computations.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_vec(self.shape.clone(), data).unwrap()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Invalid(_)));
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        let err = Tensor::<f64>::from_vec(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::Invalid(_)));
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::<f64>::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rand_uniform_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::<f32>::rand_uniform(vec![4, 4], -1.0, 1.0, &mut a);
        let tb = Tensor::<f32>::rand_uniform(vec![4, 4], -1.0, 1.0, &mut b);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::<f64>::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }
}

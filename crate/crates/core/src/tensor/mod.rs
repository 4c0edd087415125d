//! Dense tensors and a whole-tensor reverse-mode tape.
//!
//! Training runs in `f32`; gradient checks rebuild the same computation in
//! `f64`. Everything numeric in the crate is generic over [`Real`].

mod gemm;
pub mod gradcheck;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use thiserror::Error;

pub use gemm::{gemm, MatView, MatViewMut};
pub use tape::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: token id {id} out of range for vocabulary of {vocab}")]
    VocabOutOfRange {
        op: &'static str,
        id: usize,
        vocab: usize,
    },
    #[error("masked_cross_entropy: mask selects no position")]
    DegenerateMask,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: caller (`gemm::gemm`) has bounds-checked every view.
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: caller (`gemm::gemm`) has bounds-checked every view.
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

/// A dense row-major array that can carry an accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn randn<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rand_distr::Distribution::sample(&normal, rng))).collect();
        Self::new(shape.to_vec(), data).expect("size matches")
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: rand::Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of(if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 }))
            .collect();
        Self::new(shape.to_vec(), data).expect("size matches")
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extents flattened; equals `shape[0]` for matrices.
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Freezing drops any accumulated gradient.
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient. No-op for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-type conversion. Gradients are not carried over.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn frozen_tensor_never_gets_grad() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Tensor::<f32>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}

//! Dense row-major tensors, rank 1..=4, generic over the float width.
//!
//! f32 is the training dtype; f64 exists for gradient verification, where
//! finite differences need the extra mantissa bits.

use crate::error::{Error, Result};
use std::fmt;

/// Element dtype tag, used by the checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Float widths the stack is generic over. Everything numeric goes through
/// this trait so the same graph code runs in f32 and f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Named to avoid clashing with `FromPrimitive::from_f64`.
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn of_f32(v: f32) -> Self {
        Self::of_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking rank, element count, and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Constraint(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at flat index {pos} while building tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: F) -> Result<Self> {
        Self::from_vec(&[1], vec![value])
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access to elements. The caller keeps the finiteness invariant.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Constraint(format!(
                "gradient length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Constraint(format!(
                "cannot reshape {:?} ({}) to {:?} ({})",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    /// (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::Constraint(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Element by multi-index; test helper, not a hot path.
    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds at axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{context}: non-finite value at flat index {pos}"
            )));
        }
        Ok(())
    }

    /// Lossy dtype conversion, used to lift f32 params into f64 for checks.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of_f64(Scalar::as_f64(*v))).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Constraint(format!(
            "tensor rank must be 1..=4, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Constraint(format!(
            "tensor dimensions must be positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

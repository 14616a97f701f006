//! Dense tensors and the reverse-mode tape.
//!
//! Everything downstream (encoder, adapters, training) is built on two types:
//! [`Tensor`], a flat row-major value buffer with shape metadata and an
//! optional gradient slot, and [`tape::Tape`], an eager define-by-run record
//! of operations that is replayed in reverse to fill those gradient slots.
//!
//! Computation is generic over the scalar type: `f32` is the training
//! default, `f64` exists for gradient-check suites where central finite
//! differences need headroom.

mod element;
pub mod tape;

pub use element::Element;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense numeric array: shape, flat value buffer, optional gradient.
///
/// Invariants: `values.len() == product(shape)`, and `grad`, when present,
/// has the same length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    values: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor from a shape and a flat buffer; fails on length mismatch
    /// or a zero extent.
    pub fn from_values(shape: Vec<usize>, values: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![E::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![v; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], values: vec![v], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[E] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [E] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Gradient buffer, if one has been produced by a backward pass.
    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<E>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.values.len(), "grad length mismatch");
        }
        self.grad = grad;
    }

    /// Extent of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as a 2-D matrix over the last dimension.
    pub fn leading(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// Single scalar value; panics if the tensor is not a scalar.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Convert the value buffer to another element type (e.g. f32 -> f64).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Max |a - b| over two same-shaped tensors. Test and diagnostics helper.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

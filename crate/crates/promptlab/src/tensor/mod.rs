//! Dense f64 tensors with reverse-mode gradient propagation.
//!
//! Everything in this crate trains through this module: a [`Tensor`] is a
//! row-major flat buffer plus shape, a [`Graph`] records primitive
//! applications during a forward pass and replays them in reverse for
//! gradients, and [`Adam`] consumes the accumulated gradients.
//!
//! All arithmetic is 64-bit and single-threaded per graph with a fixed
//! accumulation order, so two identical runs produce bit-identical results.

mod adam;
mod fdcheck;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use fdcheck::{finite_difference_gradient, relative_error};
pub use graph::{Graph, Var};

use thiserror::Error;

/// Additive attention-bias sentinel standing in for negative infinity.
///
/// Large enough that `exp(x + MASK_NEG_INF)` underflows to exactly 0.0 for
/// any realistic logit, small enough to never produce NaN in f64.
pub const MASK_NEG_INF: f64 = -1e9;

/// Bias entries at or below this threshold are treated as masked.
pub const MASK_THRESHOLD: f64 = -0.5e9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: left {left:?}, right {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("row {row} is entirely masked; softmax is degenerate")]
    DegenerateRow { row: usize },
    #[error("empty last dimension in {op}")]
    EmptyDimension { op: &'static str },
    #[error("all positions ignored; loss is empty")]
    EmptyLoss,
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {index} has no gradient; run backward first")]
    UninitializedGradient { index: usize },
    #[error("target id {target} out of range for vocab {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
}

/// Dense n-dimensional array of f64, row-major, with an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks this tensor as a trainable parameter.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulates `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a matrix (product of all but the last axis).
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            usize::from(!self.data.is_empty())
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::zeros(vec![3]).with_requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }
}

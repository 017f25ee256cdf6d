//! Dense tensors with a recorded-operation tape for reverse-mode gradients,
//! plus a central-difference gradient checker.

mod gradcheck;
mod tape;

use thiserror::Error;

use crate::matrix::Matrix;

pub use gradcheck::{gradcheck, gradcheck_many, primitive_case, primitive_gradchecks, Program, PRIMITIVES};
pub use tape::{normal_cdf, normal_pdf, sigmoid, softplus, Gradients, SparseOperator, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: [usize; 2], right: [usize; 2] },
    #[error("backward needs a 1x1 loss, got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("non-finite value produced by {op}")]
    NonFiniteInput { op: &'static str },
    #[error("conjugate gradient did not converge: residual {residual:e} after {iterations} iterations")]
    CgNonConvergence { residual: f64, iterations: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A named trainable value with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub value: Matrix,
    pub requires_grad: bool,
    pub grad: Option<Matrix>,
}

impl Tensor {
    pub fn new(value: Matrix, requires_grad: bool) -> Self {
        Self { value, requires_grad, grad: None }
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the accumulator.
    pub fn accumulate_grad(&mut self, g: &Matrix) {
        assert_eq!(g.shape(), self.value.shape(), "gradient shape mismatch");
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }
}

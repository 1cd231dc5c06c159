//! Dense-matrix substrate with reverse-mode gradient propagation.
//!
//! The compute pattern is small throughout: node sets of a few dozen rows,
//! feature widths in the hundreds. Everything is row-major dense, and the
//! gradient tape is rebuilt for every optimizer step.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use matrix::{sigmoid_scalar, Matrix, Real};
pub use tape::{Gradients, Tape, Var};

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.rows() * self.value.cols()
    }
}

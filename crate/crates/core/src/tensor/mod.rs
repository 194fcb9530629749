//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Every forward operation is recorded on a [`Tape`] as an [`Op`] together with
//! its output value. [`Tape::backward`] walks the record in reverse to produce
//! gradients, and [`Tape::replay`] re-evaluates it from the leaves.

mod dense;
mod tape;

use thiserror::Error;

pub use dense::Tensor;
pub use tape::{Gradients, Op, Tape, Var, LOG_FLOOR, TANH_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}: no operands")]
    Empty(&'static str),
}

impl TensorError {
    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The tape is rebuilt on every forward pass. It records exactly the operator
//! set the ranking network needs: dense algebra, graph gather/scatter, the
//! normalizations, and the attention softmax with a differentiable temperature.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, op_suite, GradcheckReport, FD_STEP, RELATIVE_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced in forward pass")]
    NonFinite { op: &'static str },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

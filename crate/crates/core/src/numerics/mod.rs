//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use tape::{concat_cols, concat_rows, Gradients, Tape, Var};
pub use tensor::{log_softmax_slice, logsumexp, matmul, softmax_slice, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of bounds for size {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: range {start}..{end} out of bounds for shape {shape:?}")]
    Slice { op: &'static str, start: usize, end: usize, shape: Vec<usize> },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("finite difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective evaluated to a non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

//! Dense 64-bit tensor arithmetic with reverse-mode autodiff and Adadelta.
//!
//! Tensors are row-major and always two-dimensional; a vector is a `1 x n`
//! row. Forward primitives are recorded on a [`Tape`] and replayed in reverse
//! by [`Tape::backward`] to produce gradients for every tracked tensor.

mod adadelta;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adadelta::AdadeltaState;
pub use gradcheck::{central_difference, max_relative_error, relative_error};
pub use params::{Binding, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("{op}: index ({row}, {col}) out of range for {rows}x{cols} tensor")]
    IndexOutOfRange {
        op: &'static str,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tensor data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter name '{0}'")]
    UnknownParam(String),
    #[error("parameter file error: {0}")]
    ParamFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

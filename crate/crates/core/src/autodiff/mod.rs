//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! A fresh [`Tape`] is built for every forward pass. [`Tape::backward`]
//! returns ordinary gradients; [`Tape::deeplift`] runs the same sweep
//! against a structurally identical reference tape and returns DeepLIFT
//! multipliers instead.

mod tape;
mod tensor;


pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("softmax mask excludes every entry")]
    EmptyMask,
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("operation `{0}` is not supported by DeepLIFT")]
    Unsupported(&'static str),
    #[error("reference tape differs at node {index}: {detail}")]
    ReferenceMismatch { index: usize, detail: String },
}

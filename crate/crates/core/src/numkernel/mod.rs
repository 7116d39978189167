//! Dense `f64` tensors, a reverse-mode gradient tape and a central-difference
//! gradient checker. Every loss in the crate is assembled from the primitives
//! recorded here.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Gradients, Tape, Var, DEFAULT_EPSILON};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: no operands")]
    Empty { op: &'static str },
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable {index} is not recorded on this tape ({len} nodes)")]
    NotOnTape { index: usize, len: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

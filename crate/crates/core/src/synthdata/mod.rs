//! Labeled synthetic token datasets, a frozen stand-in teacher, and the
//! on-disk embedding/checkpoint format.

mod dataset;
pub mod io;
mod teacher;

pub use dataset::{gen_token_dataset, stack_tokens, Dataset, DatasetSpec, TokenSet};
pub use io::{load_embeddings, save_embeddings, Checkpoint};
pub use teacher::{SyntheticTeacher, TeacherSpec};

use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator settings: {0}")]
    InvalidSpec(String),
    #[error("{context}: expected dimension {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected_bytes} bytes, found {got_bytes}")]
    Truncated { expected_bytes: usize, got_bytes: usize },
    #[error("inconsistent contents: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

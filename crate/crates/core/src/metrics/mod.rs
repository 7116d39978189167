//! Evaluation: scaled-Gram orthogonality, cosine kNN classification, KNN+
//! out-of-distribution scoring and random-projection diagnostics.

mod gram;
mod jl;
mod knn;
mod ood;

pub use gram::{gram_density_data, gram_orthogonality, GramDensity, GramReport, GramSide};
pub use jl::{jl_angle_check, jl_construct, jl_norm_preservation_check, AngleCheck, JlMap, NormCheck};
pub use knn::{knn_accuracy, knn_classify, DEFAULT_KNN_K};
pub use ood::{auroc, fpr_at_95, knn_plus_scores, ood_evaluate, percentile, OodResult};

use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("k = {k} is outside 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("sample fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid sizes: {0}")]
    InvalidSize(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

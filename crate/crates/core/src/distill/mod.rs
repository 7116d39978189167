//! Distillation: the student network, optimizers, the TinTeM and Proteus
//! update steps, and the epoch loop that records a [`TrainHistory`].
//!
//! TinTeM trains a teacher head `h: D_T -> D_S` with the multi-temperature
//! similarity loss while the student regresses onto `h(T(x))` under a cosine
//! (or MSE) loss. In the frozen variant the student target is detached, so the
//! head only sees the similarity loss; the weighted variant lets both terms
//! reach the head and scales the similarity loss by `gamma`.
//!
//! Proteus instead raises the student outputs into the teacher space with two
//! heads (all tokens, class token) and applies an L2 loss there.

mod config;
mod optim;
mod student;
mod train;

pub use config::{DistillConfig, StudentMetric, Variant};
pub use optim::{Optimizer, OptimizerConfig};
pub use student::{student_forward_var, StudentNet, StudentVars};
pub use train::{
    evaluate_dim_red, proteus_step, tintem_step, tintem_weighted_step, train, train_on, Batch, EpochRecord,
    HeadGram, LossComponents, ProteusOptim, TintemOptim, TrainData, TrainHistory, TrainOutput, TrainedModels,
};

use thiserror::Error;

use crate::heads::HeadError;
use crate::metrics::MetricsError;
use crate::numkernel::KernelError;
use crate::simgeom::GeomError;
use crate::synthdata::DataError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation settings: {0}")]
    Config(String),
    #[error("{context}: expected dimension {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss ({0})")]
    NonFinite(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<DistillError>,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

//! Normalization-plus-linear heads.
//!
//! One architecture serves both directions: the teacher head maps teacher
//! embeddings down to the student width, the baseline's student heads map
//! student embeddings up to the teacher width.
//!
//! In `layernorm` mode a head computes
//!
//! ```text
//! u   = (z - mean(z)) / sqrt(var(z) + 1e-6)
//! out = (u * gamma + beta1) W + beta2
//! ```
//!
//! and in `none` mode the normalization step is skipped (`u = z`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{KernelError, Tape, Tensor, Var};
use crate::synthdata::{Checkpoint, DataError};

pub const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    LayerNorm,
    None,
}

impl NormMode {
    fn as_str(self) -> &'static str {
        match self {
            NormMode::LayerNorm => "layernorm",
            NormMode::None => "none",
        }
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("head dimensions must be positive, got {d_in} -> {d_out}")]
    InvalidDims { d_in: usize, d_out: usize },
    #[error("head expects inputs of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub gamma: Tensor,
    pub beta1: Tensor,
    pub weight: Tensor,
    pub beta2: Tensor,
    pub norm_mode: NormMode,
}

/// Fresh head: `gamma = 1`, zero biases, `W` standard normal scaled by `1/sqrt(d_in)`.
pub fn init_head(d_in: usize, d_out: usize, norm_mode: NormMode, seed: u64) -> Result<HeadParams, HeadError> {
    if d_in == 0 || d_out == 0 {
        return Err(HeadError::InvalidDims { d_in, d_out });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_in as f64).sqrt();
    let w = (0..d_in * d_out)
        .map(|_| { let x: f64 = StandardNormal.sample(&mut rng); scale * x })
        .collect::<Vec<f64>>();
    Ok(HeadParams {
        gamma: Tensor::ones(&[d_in]),
        beta1: Tensor::zeros(&[d_in]),
        weight: Tensor::new(vec![d_in, d_out], w)?,
        beta2: Tensor::zeros(&[d_out]),
        norm_mode,
    })
}

/// Tape handles for one head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta1: Var,
    pub weight: Var,
    pub beta2: Var,
    pub norm_mode: NormMode,
}

impl HeadVars {
    pub fn params(&self) -> [Var; 4] {
        [self.gamma, self.beta1, self.weight, self.beta2]
    }
}

impl HeadParams {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Parameter tensors in the order `gamma, beta1, W, beta2`.
    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.gamma, &mut self.beta1, &mut self.weight, &mut self.beta2]
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadVars {
            gamma: put(&self.gamma),
            beta1: put(&self.beta1),
            weight: put(&self.weight),
            beta2: put(&self.beta2),
            norm_mode: self.norm_mode,
        }
    }

    pub fn head_forward(&self, z: &[f64]) -> Result<Vec<f64>, HeadError> {
        Ok(self.forward_rows(&Tensor::vector(z.to_vec()))?.into_data())
    }

    /// Applies the head to every row of `z` (any rank, rows along the last axis).
    pub fn forward_rows(&self, z: &Tensor) -> Result<Tensor, HeadError> {
        if z.row_len() != self.d_in() || z.rank() == 0 {
            return Err(HeadError::Dimension {
                expected: self.d_in(),
                got: z.row_len(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(z.clone());
        let out = head_forward_var(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self, model: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(model);
        ck.meta.insert("norm_mode".into(), self.norm_mode.as_str().into());
        ck.push("gamma", self.gamma.clone());
        ck.push("beta1", self.beta1.clone());
        ck.push("weight", self.weight.clone());
        ck.push("beta2", self.beta2.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HeadError> {
        let norm_mode = match ck.meta.get("norm_mode").and_then(|v| v.as_str()) {
            Some("none") => NormMode::None,
            Some("layernorm") | None => NormMode::LayerNorm,
            Some(other) => {
                return Err(DataError::Inconsistent(format!("unknown norm_mode {other:?}")).into())
            }
        };
        let head = Self {
            gamma: ck.get("gamma")?.clone(),
            beta1: ck.get("beta1")?.clone(),
            weight: ck.get("weight")?.clone(),
            beta2: ck.get("beta2")?.clone(),
            norm_mode,
        };
        let (d_in, d_out) = (head.d_in(), head.d_out());
        for (t, n) in [(&head.gamma, d_in), (&head.beta1, d_in), (&head.beta2, d_out)] {
            if t.numel() != n {
                return Err(HeadError::Dimension { expected: n, got: t.numel() });
            }
        }
        Ok(head)
    }
}

/// Records `h(z)` row-wise on the tape.
pub fn head_forward_var(tape: &mut Tape, h: &HeadVars, z: Var) -> Result<Var, KernelError> {
    let u = match h.norm_mode {
        NormMode::LayerNorm => {
            let mu = tape.row_mean(z)?;
            let centered = tape.sub_col(z, mu)?;
            let var = tape.row_var(z)?;
            let var = tape.add_scalar(var, LAYERNORM_EPS);
            let sd = tape.sqrt(var);
            tape.div_col(centered, sd)?
        }
        NormMode::None => z,
    };
    let scaled = tape.mul_row(u, h.gamma)?;
    let shifted = tape.add_row(scaled, h.beta1)?;
    let mapped = tape.matmul(shifted, h.weight)?;
    tape.add_row(mapped, h.beta2)
}

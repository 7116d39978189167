//! Cosine similarity, the von Mises-Fisher kernel, symmetric similarity
//! matrices and the losses built from them.
//!
//! For a point set `p_1..p_N` and temperature `tau` the conditional affinity
//! is a softmax over cosine similarities with the self-pair excluded:
//!
//! ```text
//! p(j|i) = exp(cos(p_i, p_j) / tau) / sum_{k != i} exp(cos(p_i, p_k) / tau)
//! P_ij   = (p(j|i) + p(i|j)) / (2N)
//! ```
//!
//! The multi-temperature loss averages `KL(P^tau || Q^tau)` over a
//! [`TemperatureSet`], where `P` comes from the input points and `Q` from
//! their images. It is zero exactly when all pairwise cosines agree.
//!
//! Each loss has a plain entry point (values in, number out) and a `*_var`
//! variant that records the computation on a [`Tape`] for training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{head_forward_var, HeadError, HeadParams, HeadVars};
use crate::numkernel::{KernelError, Tape, Tensor, Var, DEFAULT_EPSILON};
use crate::synthdata::{stack_tokens, DataError, TokenSet};

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("zero vector at index {index}")]
    Degenerate { index: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("temperature must be finite and > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("temperature set {0}")]
    InvalidTemperatureSet(String),
    #[error("similarity matrices differ in {0}")]
    Mismatch(String),
    #[error("sample {index} has {tokens} token(s); the feature term needs at least 2")]
    TooFewTokens { index: usize, tokens: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Non-empty set of distinct positive temperatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperatureSet(Vec<f64>);

impl TemperatureSet {
    pub fn new(temps: Vec<f64>) -> Result<Self, GeomError> {
        if temps.is_empty() {
            return Err(GeomError::InvalidTemperatureSet("is empty".into()));
        }
        for (i, &t) in temps.iter().enumerate() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(GeomError::InvalidTemperature(t));
            }
            if temps[..i].contains(&t) {
                return Err(GeomError::InvalidTemperatureSet(format!("repeats {t}")));
            }
        }
        Ok(Self(temps))
    }

    /// `[0.01, 0.02, ..., 0.10]`.
    pub fn default_set() -> Self {
        Self((1..=10).map(|i| i as f64 / 100.0).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for TemperatureSet {
    fn default() -> Self {
        Self::default_set()
    }
}

impl TryFrom<Vec<f64>> for TemperatureSet {
    type Error = GeomError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TemperatureSet> for Vec<f64> {
    fn from(t: TemperatureSet) -> Self {
        t.0
    }
}

/// Symmetric affinity matrix with zero diagonal and off-diagonals summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    tau: f64,
    entries: Tensor,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.at(i, j)
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }
}

fn check_tau(tau: f64) -> Result<(), GeomError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GeomError::InvalidTemperature(tau))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_nonzero(points: &Tensor) -> Result<(), GeomError> {
    match points.rows().position(|r| norm(r) <= DEFAULT_EPSILON) {
        Some(index) => Err(GeomError::Degenerate { index }),
        None => Ok(()),
    }
}

pub fn cosine_sim(y: &[f64], z: &[f64]) -> Result<f64, GeomError> {
    if y.len() != z.len() {
        return Err(GeomError::LengthMismatch {
            left: y.len(),
            right: z.len(),
        });
    }
    let (ny, nz) = (norm(y), norm(z));
    if ny <= DEFAULT_EPSILON {
        return Err(GeomError::Degenerate { index: 0 });
    }
    if nz <= DEFAULT_EPSILON {
        return Err(GeomError::Degenerate { index: 1 });
    }
    let dot: f64 = y.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok((dot / (ny * nz)).clamp(-1.0, 1.0))
}

/// Unnormalized von Mises-Fisher affinity `exp(cos(y, z) / tau)`.
pub fn vmf_kernel(y: &[f64], z: &[f64], tau: f64) -> Result<f64, GeomError> {
    check_tau(tau)?;
    Ok((cosine_sim(y, z)? / tau).exp())
}

/// Records the `[g, n, n]` similarity matrices of `[g, n, d]` point groups.
pub fn similarity_var(tape: &mut Tape, cos: Var, tau: f64) -> Result<Var, KernelError> {
    let n = tape.value(cos).shape()[1];
    let logits = tape.scale(cos, 1.0 / tau);
    let cond = tape.softmax_offdiag(logits)?;
    let cond_t = tape.transpose_last2(cond)?;
    let both = tape.add(cond, cond_t)?;
    Ok(tape.scale(both, 1.0 / (2.0 * n as f64)))
}

/// Elementwise log of [`similarity_var`], computed in the log domain so that
/// entries far below machine precision keep finite, exact logarithms.
/// Diagonal entries are meaningless and should be masked by the caller.
pub fn log_similarity_var(tape: &mut Tape, cos: Var, tau: f64) -> Result<Var, KernelError> {
    let n = tape.value(cos).shape()[1];
    let logits = tape.scale(cos, 1.0 / tau);
    let lc = tape.log_softmax_offdiag(logits)?;
    let lct = tape.transpose_last2(lc)?;
    let both = tape.logaddexp(lc, lct)?;
    Ok(tape.add_scalar(both, -(2.0 * n as f64).ln()))
}

/// Pairwise cosine similarities within each group of a `[g, n, d]` tensor.
pub fn cosine_matrix_var(tape: &mut Tape, points: Var) -> Result<Var, KernelError> {
    let norms = tape.row_norm(points)?;
    let unit = tape.div_col(points, norms)?;
    tape.bmm_nt(unit, unit)
}

pub fn similarity_matrix(points: &Tensor, tau: f64) -> Result<SimilarityMatrix, GeomError> {
    check_tau(tau)?;
    if points.rank() != 2 {
        return Err(KernelError::Rank {
            op: "similarity_matrix",
            expected: 2,
            shape: points.shape().to_vec(),
        }
        .into());
    }
    let n = points.shape()[0];
    if n < 2 {
        return Err(GeomError::TooFewPoints { needed: 2, got: n });
    }
    check_nonzero(points)?;
    let mut tape = Tape::new();
    let p = tape.constant(points.reshape(&[1, n, points.shape()[1]])?);
    let cos = cosine_matrix_var(&mut tape, p)?;
    let sim = similarity_var(&mut tape, cos, tau)?;
    Ok(SimilarityMatrix {
        tau,
        entries: tape.value(sim).reshape(&[n, n])?,
    })
}

/// `sum_{i != j} P_ij ln(P_ij / Q_ij)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &SimilarityMatrix, q: &SimilarityMatrix) -> Result<f64, GeomError> {
    if p.n() != q.n() {
        return Err(GeomError::Mismatch(format!("size: {} vs {}", p.n(), q.n())));
    }
    if p.tau != q.tau {
        return Err(GeomError::Mismatch(format!("temperature: {} vs {}", p.tau, q.tau)));
    }
    let n = p.n();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i == j || pij <= 0.0 {
                continue;
            }
            total += pij * (pij.ln() - q.get(i, j).max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok(total)
}

/// Mean over groups and temperatures of `KL(P^tau || Q^tau)` for `[g, n, d]`
/// inputs `p` and `[g, n, d']` targets `q`.
pub fn kl_multi_temp_var(tape: &mut Tape, p: Var, q: Var, temps: &TemperatureSet) -> Result<Var, KernelError> {
    let (sp, sq) = (tape.value(p).shape().to_vec(), tape.value(q).shape().to_vec());
    if sp.len() != 3 || sq.len() != 3 || sp[..2] != sq[..2] {
        return Err(KernelError::Shape {
            op: "kl_multi_temp",
            left: sp,
            right: sq,
        });
    }
    let groups = sp[0] as f64;
    let cos_p = cosine_matrix_var(tape, p)?;
    let cos_q = cosine_matrix_var(tape, q)?;
    let mut total: Option<Var> = None;
    for &tau in temps.as_slice() {
        let pm = similarity_var(tape, cos_p, tau)?;
        let lp = log_similarity_var(tape, cos_p, tau)?;
        let lq = log_similarity_var(tape, cos_q, tau)?;
        let diff = tape.sub(lp, lq)?;
        let terms = tape.mul(pm, diff)?;
        let kl = tape.sum_all(terms);
        total = Some(match total {
            None => kl,
            Some(acc) => tape.add(acc, kl)?,
        });
    }
    let total = total.expect("temperature sets are non-empty");
    Ok(tape.scale(total, 1.0 / (temps.len() as f64 * groups)))
}

/// Multi-temperature KL loss between a point set and its image.
pub fn kl_loss_multi_temp(p: &Tensor, q: &Tensor, temps: &TemperatureSet) -> Result<f64, GeomError> {
    if p.rank() != 2 || q.rank() != 2 {
        return Err(KernelError::Shape {
            op: "kl_loss_multi_temp",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        }
        .into());
    }
    let (n, nq) = (p.shape()[0], q.shape()[0]);
    if n != nq {
        return Err(GeomError::LengthMismatch { left: n, right: nq });
    }
    if n < 2 {
        return Err(GeomError::TooFewPoints { needed: 2, got: n });
    }
    check_nonzero(p)?;
    check_nonzero(q)?;
    let mut tape = Tape::new();
    let pv = tape.constant(p.reshape(&[1, n, p.shape()[1]])?);
    let qv = tape.constant(q.reshape(&[1, n, q.shape()[1]])?);
    let loss = kl_multi_temp_var(&mut tape, pv, qv, temps)?;
    Ok(tape.scalar(loss)?)
}

/// Dimensionality-reduction loss of a head over a `[b, t, D]` teacher batch:
/// the class-token KL across the batch plus, when `feature_term` is set, the
/// batch mean of each sample's KL over its own tokens.
pub fn dim_red_loss_var(
    tape: &mut Tape,
    teacher: Var,
    head: &HeadVars,
    temps: &TemperatureSet,
    feature_term: bool,
) -> Result<Var, KernelError> {
    let out = head_forward_var(tape, head, teacher)?;
    dim_red_from_outputs(tape, teacher, out, temps, feature_term)
}

/// Same as [`dim_red_loss_var`] for precomputed head outputs `[b, t, D_out]`.
pub fn dim_red_from_outputs(
    tape: &mut Tape,
    teacher: Var,
    projected: Var,
    temps: &TemperatureSet,
    feature_term: bool,
) -> Result<Var, KernelError> {
    let shape = tape.value(teacher).shape().to_vec();
    let d_out = tape.value(projected).row_len();
    let b = shape[0];
    let p_class = tape.select1(teacher, 0)?;
    let p_class = tape.reshape(p_class, &[1, b, shape[2]])?;
    let q_class = tape.select1(projected, 0)?;
    let q_class = tape.reshape(q_class, &[1, b, d_out])?;
    let class_term = kl_multi_temp_var(tape, p_class, q_class, temps)?;
    if !feature_term {
        return Ok(class_term);
    }
    let feature = kl_multi_temp_var(tape, teacher, projected, temps)?;
    tape.add(class_term, feature)
}

fn validate_batch(batch: &[TokenSet], feature_term: bool) -> Result<(), GeomError> {
    if batch.len() < 2 {
        return Err(GeomError::TooFewPoints {
            needed: 2,
            got: batch.len(),
        });
    }
    if feature_term {
        if let Some((index, t)) = batch.iter().enumerate().find(|(_, t)| t.n_patch() < 1) {
            return Err(GeomError::TooFewTokens {
                index,
                tokens: t.n_patch() + 1,
            });
        }
    }
    Ok(())
}

pub fn dim_red_loss(
    batch: &[TokenSet],
    head: &HeadParams,
    temps: &TemperatureSet,
    feature_term: bool,
) -> Result<f64, GeomError> {
    validate_batch(batch, feature_term)?;
    let stacked = stack_tokens(batch)?;
    if stacked.shape()[2] != head.d_in() {
        return Err(HeadError::Dimension {
            expected: head.d_in(),
            got: stacked.shape()[2],
        }
        .into());
    }
    let mut tape = Tape::new();
    let vars = head.register(&mut tape, false);
    let t = tape.constant(stacked);
    let loss = dim_red_loss_var(&mut tape, t, &vars, temps, feature_term)?;
    Ok(tape.scalar(loss)?)
}

/// Mean cosine distance between paired rows of `z` and `y`.
pub fn cosine_set_loss_var(tape: &mut Tape, z: Var, y: Var) -> Result<Var, KernelError> {
    let nz = tape.row_norm(z)?;
    let zu = tape.div_col(z, nz)?;
    let ny = tape.row_norm(y)?;
    let yu = tape.div_col(y, ny)?;
    let prod = tape.mul(zu, yu)?;
    let cos = tape.row_sum(prod)?;
    let mean = tape.mean_all(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean over rows of the mean squared coordinate error.
pub fn l2_set_loss_var(tape: &mut Tape, z: Var, y: Var) -> Result<Var, KernelError> {
    let d = tape.sub(z, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

fn check_pair(z: &Tensor, y: &Tensor) -> Result<(), GeomError> {
    if z.n_rows() != y.n_rows() {
        return Err(GeomError::LengthMismatch {
            left: z.n_rows(),
            right: y.n_rows(),
        });
    }
    if z.shape() != y.shape() {
        return Err(KernelError::Shape {
            op: "set_loss",
            left: z.shape().to_vec(),
            right: y.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

pub fn cosine_set_loss(z: &Tensor, y: &Tensor) -> Result<f64, GeomError> {
    check_pair(z, y)?;
    check_nonzero(z)?;
    check_nonzero(y)?;
    let mut tape = Tape::new();
    let (zv, yv) = (tape.constant(z.clone()), tape.constant(y.clone()));
    let loss = cosine_set_loss_var(&mut tape, zv, yv)?;
    Ok(tape.scalar(loss)?)
}

pub fn l2_set_loss(z: &Tensor, y: &Tensor) -> Result<f64, GeomError> {
    check_pair(z, y)?;
    let mut tape = Tape::new();
    let (zv, yv) = (tape.constant(z.clone()), tape.constant(y.clone()));
    let loss = l2_set_loss_var(&mut tape, zv, yv)?;
    Ok(tape.scalar(loss)?)
}

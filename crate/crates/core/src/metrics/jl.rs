use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ood::percentile;
use super::MetricsError;
use crate::numkernel::Tensor;

/// Random projection `f(x) = M x / sqrt(m)` with standard-normal `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct JlMap {
    matrix: Tensor,
    seed: u64,
}

fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

fn check_sizes(d: usize, m: usize) -> Result<(), MetricsError> {
    if d == 0 || m == 0 {
        return Err(MetricsError::InvalidSize(format!("d = {d}, m = {m}")));
    }
    Ok(())
}

pub fn jl_construct(d: usize, m: usize, seed: u64) -> Result<JlMap, MetricsError> {
    check_sizes(d, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; m * d];
    fill_normal(&mut rng, &mut data);
    Ok(JlMap {
        matrix: Tensor::new(vec![m, d], data)?,
        seed,
    })
}

fn project(matrix: &[f64], m: usize, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let scale = 1.0 / (m as f64).sqrt();
    (0..m)
        .map(|i| matrix[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect()
}

impl JlMap {
    pub fn d(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, MetricsError> {
        if x.len() != self.d() {
            return Err(MetricsError::Dimension {
                expected: self.d(),
                got: x.len(),
            });
        }
        Ok(project(self.matrix.data(), self.m(), x))
    }

    /// Projects every row of a `[n, d]` matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor, MetricsError> {
        let rows = x.rows().map(|r| self.apply(r)).collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.m()]));
        }
        Ok(Tensor::from_rows(&rows)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    pub d: usize,
    pub m: usize,
    pub trials: usize,
    pub mean_sq_norm: f64,
    /// `(eps, fraction of trials with |f(x)|^2 in (1 - eps, 1 + eps))`.
    pub success: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleCheck {
    pub d: usize,
    pub m: usize,
    pub trials: usize,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    loop {
        fill_normal(rng, &mut v);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return None;
    }
    Some((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// Draws a fresh projection and a random unit vector per trial and records
/// how often `|f(x)|^2` lands within each `eps` of 1.
pub fn jl_norm_preservation_check(
    d: usize,
    m: usize,
    trials: usize,
    seed: u64,
    eps_grid: &[f64],
) -> Result<NormCheck, MetricsError> {
    check_sizes(d, m)?;
    if trials == 0 {
        return Err(MetricsError::InvalidSize("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = vec![0.0; m * d];
    let mut sq_norms = Vec::with_capacity(trials);
    for _ in 0..trials {
        fill_normal(&mut rng, &mut matrix);
        let x = unit_vector(&mut rng, d);
        sq_norms.push(project(&matrix, m, &x).iter().map(|v| v * v).sum::<f64>());
    }
    let success = eps_grid
        .iter()
        .map(|&eps| {
            let hits = sq_norms.iter().filter(|&&s| (s - 1.0).abs() < eps).count();
            (eps, hits as f64 / trials as f64)
        })
        .collect();
    Ok(NormCheck {
        d,
        m,
        trials,
        mean_sq_norm: sq_norms.iter().sum::<f64>() / trials as f64,
        success,
    })
}

/// Quantiles of `|cos(f(x), f(y)) - cos(x, y)|` over random unit pairs, one
/// fresh projection per trial. Pairs whose image degenerates are redrawn.
pub fn jl_angle_check(d: usize, m: usize, trials: usize, seed: u64) -> Result<AngleCheck, MetricsError> {
    check_sizes(d, m)?;
    if trials == 0 {
        return Err(MetricsError::InvalidSize("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = vec![0.0; m * d];
    let mut distortion = Vec::with_capacity(trials);
    while distortion.len() < trials {
        fill_normal(&mut rng, &mut matrix);
        let (x, y) = (unit_vector(&mut rng, d), unit_vector(&mut rng, d));
        let (fx, fy) = (project(&matrix, m, &x), project(&matrix, m, &y));
        if let (Some(before), Some(after)) = (cosine(&x, &y), cosine(&fx, &fy)) {
            distortion.push((after - before).abs());
        }
    }
    Ok(AngleCheck {
        d,
        m,
        trials,
        median: percentile(&distortion, 0.5)?,
        p90: percentile(&distortion, 0.9)?,
        max: distortion.iter().copied().fold(0.0, f64::max),
    })
}

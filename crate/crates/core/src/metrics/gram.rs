use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::numkernel::{KernelError, Tensor};

/// Which Gram matrix of `W` to inspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramSide {
    /// `W^T W`, columns against columns.
    Wtw,
    /// `W W^T`, rows against rows.
    Wwt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub side: GramSide,
    /// Mean of the diagonal of `A`.
    pub alpha: f64,
    /// `||A / alpha - I||_F`.
    pub score: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Entries of `A / alpha` split by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramDensity {
    pub side: GramSide,
    pub diagonal: Vec<f64>,
    pub off_diagonal: Vec<f64>,
}

fn gram(w: &Tensor, side: GramSide) -> Result<Tensor, MetricsError> {
    if w.rank() != 2 {
        return Err(KernelError::Rank {
            op: "gram",
            expected: 2,
            shape: w.shape().to_vec(),
        }
        .into());
    }
    if w.data().iter().all(|&v| v == 0.0) {
        return Err(MetricsError::ZeroMatrix);
    }
    let wt = w.transpose()?;
    Ok(match side {
        GramSide::Wtw => wt.matmul(w)?,
        GramSide::Wwt => w.matmul(&wt)?,
    })
}

fn scaled_gram(w: &Tensor, side: GramSide) -> Result<(Tensor, f64), MetricsError> {
    let a = gram(w, side)?;
    let n = a.shape()[0];
    let alpha = (0..n).map(|i| a.at(i, i)).sum::<f64>() / n as f64;
    Ok((a.map(|v| v / alpha), alpha))
}

pub fn gram_orthogonality(w: &Tensor, side: GramSide) -> Result<GramReport, MetricsError> {
    let (scaled, alpha) = scaled_gram(w, side)?;
    let n = scaled.shape()[0];
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            sq += (scaled.at(i, j) - target).powi(2);
        }
    }
    Ok(GramReport {
        side,
        alpha,
        score: sq.sqrt(),
        rows: w.shape()[0],
        cols: w.shape()[1],
    })
}

pub fn gram_density_data(w: &Tensor, side: GramSide) -> Result<GramDensity, MetricsError> {
    let (scaled, _) = scaled_gram(w, side)?;
    let n = scaled.shape()[0];
    let mut diagonal = Vec::with_capacity(n);
    let mut off_diagonal = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diagonal.push(scaled.at(i, j));
            } else {
                off_diagonal.push(scaled.at(i, j));
            }
        }
    }
    Ok(GramDensity {
        side,
        diagonal,
        off_diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    /// Modified Gram-Schmidt on the columns of a random matrix.
    fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Tensor {
        let g = normal(rows, cols, seed);
        let mut cols_v: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| g.at(i, j)).collect()).collect();
        for j in 0..cols {
            for k in 0..j {
                let dot: f64 = cols_v[j].iter().zip(&cols_v[k]).map(|(a, b)| a * b).sum();
                let prev = cols_v[k].clone();
                for (x, p) in cols_v[j].iter_mut().zip(&prev) {
                    *x -= dot * p;
                }
            }
            let n = cols_v[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            cols_v[j].iter_mut().for_each(|x| *x /= n);
        }
        let data = (0..rows).flat_map(|i| cols_v.iter().map(move |c| c[i])).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn scaled_square_orthogonal_scores_zero() {
        let q = orthonormal_columns(6, 6, 1).map(|v| 2.5 * v);
        for side in [GramSide::Wtw, GramSide::Wwt] {
            let r = gram_orthogonality(&q, side).unwrap();
            assert!(r.score < 1e-12, "{side:?}: {}", r.score);
            assert!((r.alpha - 6.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rectangular_asymmetry_matches_eigenvalue_oracle() {
        let w = orthonormal_columns(8, 4, 2).map(|v| 0.3 * v);
        assert!(gram_orthogonality(&w, GramSide::Wtw).unwrap().score < 1e-12);
        let wwt = gram_orthogonality(&w, GramSide::Wwt).unwrap();
        assert!((wwt.score - 8f64.sqrt()).abs() < 1e-10, "{}", wwt.score);
        assert_eq!((wwt.rows, wwt.cols), (8, 4));
    }

    #[test]
    fn random_matrix_matches_dense_oracle() {
        let w = normal(384, 768, 3);
        let got = gram_orthogonality(&w, GramSide::Wtw).unwrap();
        // Column dot products written out directly.
        let cols: Vec<Vec<f64>> = (0..768).map(|j| (0..384).map(|i| w.at(i, j)).collect()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let alpha = cols.iter().map(|c| dot(c, c)).sum::<f64>() / 768.0;
        let mut sq = 0.0;
        for i in 0..768 {
            for j in 0..768 {
                let a = dot(&cols[i], &cols[j]) / alpha - if i == j { 1.0 } else { 0.0 };
                sq += a * a;
            }
        }
        assert!((got.score - sq.sqrt()).abs() < 1e-9, "{} vs {}", got.score, sq.sqrt());
        assert!((got.alpha - alpha).abs() < 1e-9);
    }

    #[test]
    fn scale_invariance() {
        let w = normal(5, 3, 4);
        for side in [GramSide::Wtw, GramSide::Wwt] {
            let base = gram_orthogonality(&w, side).unwrap().score;
            for c in [-3.0, 0.01, 70.0] {
                let s = gram_orthogonality(&w.map(|v| c * v), side).unwrap().score;
                assert!((s - base).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn density_of_identity_and_counts() {
        let d = gram_density_data(&Tensor::eye(4), GramSide::Wtw).unwrap();
        assert_eq!(d.diagonal, vec![1.0; 4]);
        assert_eq!(d.off_diagonal, vec![0.0; 12]);
        let w = normal(7, 3, 5);
        let d = gram_density_data(&w, GramSide::Wwt).unwrap();
        assert_eq!((d.diagonal.len(), d.off_diagonal.len()), (7, 42));
        let sq: f64 = d.diagonal.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>()
            + d.off_diagonal.iter().map(|v| v * v).sum::<f64>();
        let score = gram_orthogonality(&w, GramSide::Wwt).unwrap().score;
        assert!((score * score - sq).abs() < 1e-10);
    }

    #[test]
    fn zero_matrix_rejected() {
        assert!(matches!(
            gram_orthogonality(&Tensor::zeros(&[3, 2]), GramSide::Wtw),
            Err(MetricsError::ZeroMatrix)
        ));
    }
}

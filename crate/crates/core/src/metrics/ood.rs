use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::knn::unit_rows;
use super::MetricsError;
use crate::numkernel::Tensor;

/// KNN+ scores of held-in and held-out evaluation sets against one reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub k: usize,
    pub fraction: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

fn sample_reference(reference: &Tensor, fraction: f64, seed: u64) -> Result<Vec<usize>, MetricsError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MetricsError::InvalidFraction(fraction));
    }
    let n = reference.n_rows();
    let take = ((n as f64) * fraction).round() as usize;
    if n == 0 || reference.numel() == 0 || take == 0 {
        return Err(MetricsError::Empty("sampled reference set"));
    }
    if take == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, take).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Distance from each evaluation row to its `k`-th nearest sampled reference
/// row; larger means further from the reference distribution.
pub fn knn_plus_scores(
    reference: &Tensor,
    fraction: f64,
    k: usize,
    eval: &Tensor,
    seed: u64,
    normalize: bool,
) -> Result<Vec<f64>, MetricsError> {
    let idx = sample_reference(reference, fraction, seed)?;
    if k == 0 || k > idx.len() {
        return Err(MetricsError::InvalidK { k, n: idx.len() });
    }
    if eval.numel() > 0 && eval.row_len() != reference.row_len() {
        return Err(MetricsError::Dimension {
            expected: reference.row_len(),
            got: eval.row_len(),
        });
    }
    let prep = |t: &Tensor| -> Vec<Vec<f64>> {
        if normalize {
            unit_rows(t)
        } else {
            t.rows().map(<[f64]>::to_vec).collect()
        }
    };
    let all_ref = prep(reference);
    let refs: Vec<&[f64]> = idx.iter().map(|&i| all_ref[i].as_slice()).collect();
    let mut dist = vec![0.0; refs.len()];
    Ok(prep(eval)
        .iter()
        .map(|q| {
            for (d, r) in dist.iter_mut().zip(&refs) {
                *d = q.iter().zip(*r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect())
}

/// Probability that a random OOD score exceeds a random ID score, ties ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, MetricsError> {
    if id_scores.is_empty() {
        return Err(MetricsError::Empty("ID scores"));
    }
    if ood_scores.is_empty() {
        return Err(MetricsError::Empty("OOD scores"));
    }
    let mut id = id_scores.to_vec();
    id.sort_by(f64::total_cmp);
    // Twice the Mann-Whitney count, kept integral so the ratio rounds once.
    let mut twice: u128 = 0;
    for &s in ood_scores {
        let below = id.partition_point(|&v| v < s);
        let at_or_below = id.partition_point(|&v| v <= s);
        twice += 2 * below as u128 + (at_or_below - below) as u128;
    }
    Ok(twice as f64 / (2 * id.len() * ood_scores.len()) as f64)
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Fraction of OOD scores at or below the 95th percentile of ID scores.
pub fn fpr_at_95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64, MetricsError> {
    if ood_scores.is_empty() {
        return Err(MetricsError::Empty("OOD scores"));
    }
    let threshold = percentile(id_scores, 0.95)?;
    let accepted = ood_scores.iter().filter(|&&s| s <= threshold).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

pub fn ood_evaluate(
    reference: &Tensor,
    id_eval: &Tensor,
    ood_eval: &Tensor,
    k: usize,
    fraction: f64,
    seed: u64,
    normalize: bool,
) -> Result<OodResult, MetricsError> {
    let id_scores = knn_plus_scores(reference, fraction, k, id_eval, seed, normalize)?;
    let ood_scores = knn_plus_scores(reference, fraction, k, ood_eval, seed, normalize)?;
    Ok(OodResult {
        k,
        fraction,
        auroc: auroc(&id_scores, &ood_scores)?,
        fpr95: fpr_at_95(&id_scores, &ood_scores)?,
        id_scores,
        ood_scores,
    })
}

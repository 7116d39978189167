use super::MetricsError;
use crate::numkernel::{Tensor, DEFAULT_EPSILON};

pub const DEFAULT_KNN_K: usize = 20;

pub(crate) fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(DEFAULT_EPSILON);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Majority vote among the `k` nearest training rows under cosine distance.
///
/// Neighbors at equal distance are ordered by index. A tied vote goes to the
/// class whose voting neighbors have the smallest mean distance, then to the
/// lowest label. Zero rows are treated as having cosine 0 with everything.
pub fn knn_classify(train: &Tensor, labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>, MetricsError> {
    let n = train.n_rows();
    if n == 0 || train.numel() == 0 {
        return Err(MetricsError::Empty("training set"));
    }
    if labels.len() != n {
        return Err(MetricsError::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if k == 0 || k > n {
        return Err(MetricsError::InvalidK { k, n });
    }
    if query.numel() > 0 && query.row_len() != train.row_len() {
        return Err(MetricsError::Dimension {
            expected: train.row_len(),
            got: query.row_len(),
        });
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let train_u = unit_rows(train);
    let mut out = Vec::with_capacity(query.n_rows());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in unit_rows(query) {
        dist.clear();
        dist.extend(train_u.iter().enumerate().map(|(i, t)| (1.0 - dot(&q, t), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![(0usize, 0.0f64); n_labels];
        for &(d, i) in &dist[..k] {
            let v = &mut votes[labels[i]];
            v.0 += 1;
            v.1 += d;
        }
        let best = (0..n_labels)
            .filter(|&c| votes[c].0 > 0)
            .min_by(|&a, &b| {
                let (ca, sa) = votes[a];
                let (cb, sb) = votes[b];
                cb.cmp(&ca)
                    .then((sa / ca as f64).total_cmp(&(sb / cb as f64)))
                    .then(a.cmp(&b))
            })
            .expect("k >= 1 gives at least one vote");
        out.push(best);
    }
    Ok(out)
}

pub fn knn_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    query: &Tensor,
    query_labels: &[usize],
    k: usize,
) -> Result<f64, MetricsError> {
    if query_labels.len() != query.n_rows() {
        return Err(MetricsError::Dimension {
            expected: query.n_rows(),
            got: query_labels.len(),
        });
    }
    if query_labels.is_empty() {
        return Err(MetricsError::Empty("query set"));
    }
    let pred = knn_classify(train, train_labels, query, k)?;
    let hits = pred.iter().zip(query_labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / query_labels.len() as f64)
}

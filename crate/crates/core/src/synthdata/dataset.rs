use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numkernel::Tensor;

/// One sample's embeddings: a class token plus zero or more patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    class_token: Vec<f64>,
    patch_tokens: Vec<Vec<f64>>,
}

impl TokenSet {
    pub fn new(class_token: Vec<f64>, patch_tokens: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let dim = class_token.len();
        if let Some((i, p)) = patch_tokens.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(DataError::Dimension {
                context: format!("patch token {i}"),
                expected: dim,
                got: p.len(),
            });
        }
        Ok(Self {
            class_token,
            patch_tokens,
        })
    }

    pub fn class_token(&self) -> &[f64] {
        &self.class_token
    }

    pub fn patch_tokens(&self) -> &[Vec<f64>] {
        &self.patch_tokens
    }

    pub fn dim(&self) -> usize {
        self.class_token.len()
    }

    pub fn n_patch(&self) -> usize {
        self.patch_tokens.len()
    }

    /// Class token followed by the patch tokens.
    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        std::iter::once(self.class_token.as_slice()).chain(self.patch_tokens.iter().map(Vec::as_slice))
    }

    /// Rebuilds a token set from `n_tokens` rows of `dim` values, class token first.
    pub fn from_flat(flat: &[f64], dim: usize) -> Result<Self, DataError> {
        if dim == 0 || flat.is_empty() || flat.len() % dim != 0 {
            return Err(DataError::Dimension {
                context: "flat token buffer".into(),
                expected: dim,
                got: flat.len(),
            });
        }
        let mut rows = flat.chunks(dim).map(<[f64]>::to_vec);
        let class = rows.next().unwrap_or_default();
        Self::new(class, rows.collect())
    }
}

/// Packs equal-shaped token sets into a `[n, 1 + n_patch, dim]` tensor.
pub fn stack_tokens<'a>(sets: impl IntoIterator<Item = &'a TokenSet>) -> Result<Tensor, DataError> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut n = 0;
    for set in sets {
        let here = (set.n_patch() + 1, set.dim());
        match shape {
            None => shape = Some(here),
            Some(s) if s != here => {
                return Err(DataError::Inconsistent(format!(
                    "sample {n} has {} tokens of dim {}, expected {} of dim {}",
                    here.0, here.1, s.0, s.1
                )))
            }
            _ => {}
        }
        for tok in set.tokens() {
            data.extend_from_slice(tok);
        }
        n += 1;
    }
    let (t, d) = shape.unwrap_or((1, 0));
    Ok(Tensor::new(vec![n, t, d], data)?)
}

/// Parameters of the synthetic labeled token generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_in: usize,
    pub n_patch: usize,
    pub class_separation: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<(TokenSet, usize)>,
    n_classes: usize,
    seed: u64,
}

impl Dataset {
    pub fn from_samples(samples: Vec<(TokenSet, usize)>, n_classes: usize, seed: u64) -> Result<Self, DataError> {
        let mut seen = vec![false; n_classes];
        for (i, (_, label)) in samples.iter().enumerate() {
            if *label >= n_classes {
                return Err(DataError::Inconsistent(format!(
                    "sample {i} has label {label} but n_classes = {n_classes}"
                )));
            }
            seen[*label] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(DataError::Inconsistent(format!("class {empty} has no samples")));
        }
        Ok(Self {
            samples,
            n_classes,
            seed,
        })
    }

    pub fn samples(&self) -> &[(TokenSet, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|(_, l)| *l).collect()
    }
}

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a balanced labeled dataset: every token of a class-`c` sample is
/// `separation * mean_c + N(0, I)`, with unit class means fixed by the seed.
pub fn gen_token_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    if spec.n_classes < 2 || spec.n_samples < spec.n_classes {
        return Err(DataError::InvalidSpec(format!(
            "need n_samples >= n_classes >= 2, got n_samples = {}, n_classes = {}",
            spec.n_samples, spec.n_classes
        )));
    }
    if spec.d_in < 2 {
        return Err(DataError::InvalidSpec(format!("d_in must be >= 2, got {}", spec.d_in)));
    }
    if !(spec.class_separation >= 0.0) || !spec.class_separation.is_finite() {
        return Err(DataError::InvalidSpec(format!(
            "class_separation must be finite and >= 0, got {}",
            spec.class_separation
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| unit_vec(&mut rng, spec.d_in)).collect();
    let token = |rng: &mut ChaCha8Rng, mean: &[f64]| -> Vec<f64> {
        mean.iter()
            .map(|m| { let x: f64 = StandardNormal.sample(rng); spec.class_separation * m + x })
            .collect::<Vec<f64>>()
    };
    let samples = (0..spec.n_samples)
        .map(|i| {
            let label = i % spec.n_classes;
            let class = token(&mut rng, &means[label]);
            let patches = (0..spec.n_patch).map(|_| token(&mut rng, &means[label])).collect();
            (TokenSet { class_token: class, patch_tokens: patches }, label)
        })
        .collect();
    Dataset::from_samples(samples, spec.n_classes, spec.seed)
}

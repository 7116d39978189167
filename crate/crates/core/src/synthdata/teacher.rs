use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::normal_vec;
use super::io::Checkpoint;
use super::{DataError, TokenSet};
use crate::numkernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// Norm of the fixed offset added to class-token outputs.
    pub class_offset_scale: f64,
    pub seed: u64,
}

/// Frozen token-wise network `tanh(x W1 + b1) W2 + b2`; class tokens get an
/// extra fixed offset so class and patch statistics differ.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTeacher {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    class_offset: Tensor,
    seed: u64,
}

impl SyntheticTeacher {
    pub fn new(spec: &TeacherSpec) -> Result<Self, DataError> {
        if spec.d_in == 0 || spec.hidden == 0 || spec.d_out == 0 {
            return Err(DataError::InvalidSpec(format!(
                "teacher dims must be positive: {} -> {} -> {}",
                spec.d_in, spec.hidden, spec.d_out
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scaled = |rng: &mut ChaCha8Rng, n: usize, s: f64| -> Vec<f64> {
            normal_vec(rng, n).into_iter().map(|x| x * s).collect()
        };
        let w1 = scaled(&mut rng, spec.d_in * spec.hidden, 1.0 / (spec.d_in as f64).sqrt());
        let b1 = scaled(&mut rng, spec.hidden, 0.5);
        let w2 = scaled(&mut rng, spec.hidden * spec.d_out, 1.0 / (spec.hidden as f64).sqrt());
        let dir = normal_vec(&mut rng, spec.d_out);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let offset = dir.into_iter().map(|x| x / norm * spec.class_offset_scale).collect();
        Ok(Self {
            w1: Tensor::new(vec![spec.d_in, spec.hidden], w1)?,
            b1: Tensor::vector(b1),
            w2: Tensor::new(vec![spec.hidden, spec.d_out], w2)?,
            b2: Tensor::zeros(&[spec.d_out]),
            class_offset: Tensor::vector(offset),
            seed: spec.seed,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_offset(&self) -> &[f64] {
        self.class_offset.data()
    }

    fn token(&self, x: &[f64]) -> Vec<f64> {
        let hidden = self.w1.shape()[1];
        let mut h = self.b1.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (hj, w) in h.iter_mut().zip(&self.w1.data()[i * hidden..(i + 1) * hidden]) {
                *hj += xi * w;
            }
        }
        let d_out = self.d_out();
        let mut out = self.b2.data().to_vec();
        for (j, hj) in h.iter().enumerate() {
            let a = hj.tanh();
            for (o, w) in out.iter_mut().zip(&self.w2.data()[j * d_out..(j + 1) * d_out]) {
                *o += a * w;
            }
        }
        out
    }

    pub fn teacher_forward(&self, x: &TokenSet) -> Result<TokenSet, DataError> {
        if x.dim() != self.d_in() {
            return Err(DataError::Dimension {
                context: "teacher input".into(),
                expected: self.d_in(),
                got: x.dim(),
            });
        }
        let class = self
            .token(x.class_token())
            .into_iter()
            .zip(self.class_offset.data())
            .map(|(v, o)| v + o)
            .collect();
        let patches = x.patch_tokens().iter().map(|p| self.token(p)).collect();
        TokenSet::new(class, patches)
    }

    /// Applies the teacher to a `[n, tokens, d_in]` stack; token 0 is the class token.
    pub fn forward_stack(&self, x: &Tensor) -> Result<Tensor, DataError> {
        if x.rank() != 3 || x.shape()[2] != self.d_in() {
            return Err(DataError::Dimension {
                context: format!("teacher input stack {:?}", x.shape()),
                expected: self.d_in(),
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        let t = x.shape()[1];
        let mut data = Vec::with_capacity(x.n_rows() * self.d_out());
        for (r, row) in x.rows().enumerate() {
            let mut out = self.token(row);
            if r % t == 0 {
                for (o, c) in out.iter_mut().zip(self.class_offset.data()) {
                    *o += c;
                }
            }
            data.extend(out);
        }
        Ok(Tensor::new(vec![x.shape()[0], t, self.d_out()], data)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("synthetic_teacher");
        ck.meta.insert("seed".into(), self.seed.into());
        for (name, t) in [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("class_offset", &self.class_offset),
        ] {
            ck.push(name, t.clone());
        }
        ck
    }
}

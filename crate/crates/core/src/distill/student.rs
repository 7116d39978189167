use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DistillError;
use crate::numkernel::{KernelError, Tape, Tensor, Var};
use crate::synthdata::{stack_tokens, Checkpoint, TokenSet};

/// Trainable token-wise network `tanh(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl StudentVars {
    pub fn params(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl StudentNet {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self, DistillError> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(DistillError::Config(format!(
                "student dims must be positive: {d_in} -> {hidden} -> {d_out}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * s
                })
                .collect()
        };
        let w1 = draw(d_in * hidden, d_in);
        let w2 = draw(hidden * d_out, hidden);
        Ok(Self {
            w1: Tensor::new(vec![d_in, hidden], w1)?,
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::new(vec![hidden, d_out], w2)?,
            b2: Tensor::zeros(&[d_out]),
            seed,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> StudentVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        StudentVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }

    /// Forward pass over a `[..., d_in]` stack.
    pub fn forward_stack(&self, x: &Tensor) -> Result<Tensor, DistillError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = student_forward_var(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, x: &TokenSet) -> Result<TokenSet, DistillError> {
        let out = self.forward_stack(&stack_tokens([x])?)?;
        Ok(TokenSet::from_flat(out.data(), self.d_out())?)
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<(), DistillError> {
        if x.rank() == 0 || x.row_len() != self.d_in() {
            return Err(DistillError::Dimension {
                context: "student input".into(),
                expected: self.d_in(),
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("student");
        ck.meta.insert("seed".into(), self.seed.into());
        for (name, t) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            ck.push(name, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DistillError> {
        if ck.model != "student" {
            return Err(DistillError::Config(format!("checkpoint holds {:?}, not a student", ck.model)));
        }
        let seed = ck.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let net = Self {
            w1: ck.get("w1")?.clone(),
            b1: ck.get("b1")?.clone(),
            w2: ck.get("w2")?.clone(),
            b2: ck.get("b2")?.clone(),
            seed,
        };
        let (d_in, hidden, d_out) = (net.d_in(), net.hidden(), net.d_out());
        if net.w1.rank() != 2 || net.b1.shape() != [hidden] || net.w2.shape() != [hidden, d_out] || net.b2.shape() != [d_out] {
            return Err(DistillError::Config(format!("student checkpoint shapes do not chain ({d_in} -> {hidden} -> {d_out})")));
        }
        Ok(net)
    }
}

pub fn student_forward_var(tape: &mut Tape, s: &StudentVars, x: Var) -> Result<Var, KernelError> {
    let h = tape.matmul(x, s.w1)?;
    let h = tape.add_row(h, s.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, s.w2)?;
    tape.add_row(o, s.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::finite_diff_check;

    #[test]
    fn init_and_purity() {
        let s = StudentNet::new(4, 5, 3, 7).unwrap();
        assert_eq!(s, StudentNet::new(4, 5, 3, 7).unwrap());
        assert!(s.b1.data().iter().chain(s.b2.data()).all(|&v| v == 0.0));
        let a = TokenSet::new(vec![0.1, 0.2, 0.3, 0.4], vec![vec![1.0; 4], vec![-1.0; 4]]).unwrap();
        let mut patches = a.patch_tokens().to_vec();
        patches[0][1] = 5.0;
        let b = TokenSet::new(a.class_token().to_vec(), patches).unwrap();
        let (oa, ob) = (s.forward(&a).unwrap(), s.forward(&b).unwrap());
        assert_eq!(oa.class_token(), ob.class_token());
        assert_eq!(oa.patch_tokens()[1], ob.patch_tokens()[1]);
        assert_ne!(oa.patch_tokens()[0], ob.patch_tokens()[0]);
        assert!(s.forward_stack(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn forward_matches_hand_computation() {
        let s = StudentNet::new(2, 3, 2, 1).unwrap();
        let x = [0.7, -1.2];
        let h: Vec<f64> = (0..3).map(|j| (x[0] * s.w1.at(0, j) + x[1] * s.w1.at(1, j)).tanh()).collect();
        let expected: Vec<f64> = (0..2).map(|k| (0..3).map(|j| h[j] * s.w2.at(j, k)).sum()).collect();
        let got = s.forward_stack(&Tensor::from_rows(&[x]).unwrap()).unwrap();
        for k in 0..2 {
            assert!((got.at(0, k) - expected[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_at_f32() {
        let s = StudentNet::new(3, 4, 2, 9).unwrap();
        let back = StudentNet::from_checkpoint(&Checkpoint::from_bytes(&s.to_checkpoint().to_bytes()).unwrap()).unwrap();
        for (a, b) in s.w1.data().iter().zip(back.w1.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back.seed(), 9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = StudentNet::new(3, 4, 2, 2).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.8, 1.2, 0.3, -0.6]).unwrap();
        let err = finite_diff_check(
            |t: &mut Tape, v: Var| -> Result<Var, KernelError> {
                let vars = s.register(t, false);
                let o = student_forward_var(t, &vars, v)?;
                let sq = t.mul(o, o)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

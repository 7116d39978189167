//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends a node; [`Tape::backward`]
//! then walks the nodes in exact reverse order of recording. Nodes whose
//! inputs are all constants are marked as not needing a gradient and are
//! skipped during the reverse sweep.

use super::tensor::{matmul_raw, Tensor};
use super::KernelError;

/// Default guard for logarithms and divisions.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SubCol(usize, usize),
    DivCol(usize, usize),
    MatMul(usize, usize),
    BmmNt(usize, usize),
    TransposeLast2(usize),
    Reshape(usize),
    Select1(usize, usize),
    Concat(Vec<usize>),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sqrt(usize),
    RowSum(usize),
    RowMean(usize),
    RowVar(usize),
    RowNorm(usize),
    SoftmaxOffDiag(usize),
    LogSoftmaxOffDiag(usize),
    LogAddExp(usize, usize),
    SumAll(usize),
    MeanAll(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-threaded scratch space: build one per loss evaluation,
/// call [`Tape::backward`], read the adjoints, drop it.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    eps: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; all zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, expected: usize, a: &Tensor) -> KernelError {
    KernelError::Rank {
        op,
        expected,
        shape: a.shape().to_vec(),
    }
}

fn leading(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

impl Tape {
    pub fn new() -> Self {
        Self::with_epsilon(DEFAULT_EPSILON)
    }

    pub fn with_epsilon(eps: f64) -> Self {
        Self {
            nodes: Vec::new(),
            eps,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64, KernelError> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, KernelError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, node, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x * c);
        self.record(out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x + c);
        self.record(out, Op::AddScalar(a.0), &[a.0])
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, KernelError> {
        let (ta, tv) = (self.val(a), self.val(v));
        if tv.rank() != 1 || ta.rank() == 0 || ta.row_len() != tv.numel() {
            return Err(shape_err(op, ta, tv));
        }
        let vd = tv.data();
        let data = ta
            .rows()
            .flat_map(|row| row.iter().zip(vd).map(|(&x, &y)| f(x, y)))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, node, &[a.0, v.0]))
    }

    /// Adds vector `v` to every row of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var, KernelError> {
        self.row_broadcast("add_row", a, v, |x, y| x + y, Op::AddRow(a.0, v.0))
    }

    /// Multiplies every row of `a` elementwise by `v`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var, KernelError> {
        self.row_broadcast("mul_row", a, v, |x, y| x * y, Op::MulRow(a.0, v.0))
    }

    fn col_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        c: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, KernelError> {
        let (ta, tc) = (self.val(a), self.val(c));
        if ta.rank() == 0 || tc.shape() != leading(ta.shape()).as_slice() {
            return Err(shape_err(op, ta, tc));
        }
        let data = ta
            .rows()
            .zip(tc.data())
            .flat_map(|(row, &cv)| row.iter().map(move |&x| (x, cv)))
            .map(|(x, cv)| f(x, cv))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, node, &[a.0, c.0]))
    }

    /// Subtracts one value per row; `c` has the shape of `a` without its last axis.
    pub fn sub_col(&mut self, a: Var, c: Var) -> Result<Var, KernelError> {
        self.col_broadcast("sub_col", a, c, |x, y| x - y, Op::SubCol(a.0, c.0))
    }

    /// Divides each row by one value, guarded below by the tape epsilon.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var, KernelError> {
        let eps = self.eps;
        self.col_broadcast(
            "div_col",
            a,
            c,
            move |x, y| x / y.max(eps),
            Op::DivCol(a.0, c.0),
        )
    }

    /// Row-wise product `a [.., k] x w [k, m] -> [.., m]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var, KernelError> {
        let (ta, tw) = (self.val(a), self.val(w));
        if tw.rank() != 2 || ta.rank() == 0 || ta.row_len() != tw.shape()[0] {
            return Err(shape_err("matmul", ta, tw));
        }
        let (k, m) = (tw.shape()[0], tw.shape()[1]);
        let n = ta.n_rows();
        let data = matmul_raw(ta.data(), tw.data(), n, k, m);
        let mut shape = leading(ta.shape());
        shape.push(m);
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(out, Op::MatMul(a.0, w.0), &[a.0, w.0]))
    }

    /// Batched `a [g, n, d] x b [g, m, d]^T -> [g, n, m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[2] {
            return Err(shape_err("bmm_nt", ta, tb));
        }
        let (g, n, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let m = tb.shape()[1];
        let mut data = vec![0.0; g * n * m];
        for gi in 0..g {
            for i in 0..n {
                let ar = &ta.data()[(gi * n + i) * d..(gi * n + i + 1) * d];
                for j in 0..m {
                    let br = &tb.data()[(gi * m + j) * d..(gi * m + j + 1) * d];
                    data[(gi * n + i) * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
        }
        let out = Tensor::from_parts(vec![g, n, m], data);
        Ok(self.record(out, Op::BmmNt(a.0, b.0), &[a.0, b.0]))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var, KernelError> {
        let ta = self.val(a);
        if ta.rank() != 3 {
            return Err(rank_err("transpose_last2", 3, ta));
        }
        let out = transpose3(ta);
        Ok(self.record(out, Op::TransposeLast2(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.record(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Picks index `index` of axis 1: `[b, t, d] -> [b, d]`.
    pub fn select1(&mut self, a: Var, index: usize) -> Result<Var, KernelError> {
        let ta = self.val(a);
        if ta.rank() != 3 {
            return Err(rank_err("select1", 3, ta));
        }
        let (b, t, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        if index >= t {
            return Err(KernelError::Index {
                op: "select1",
                index,
                extent: t,
            });
        }
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&ta.data()[(bi * t + index) * d..(bi * t + index + 1) * d]);
        }
        let out = Tensor::from_parts(vec![b, d], data);
        Ok(self.record(out, Op::Select1(a.0, index), &[a.0]))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let first = parts.first().ok_or(KernelError::Empty { op: "concat" })?;
        let tail = self.val(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.val(*p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.val(*first), t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.record(out, Op::Concat(idx.clone()), &idx))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::exp);
        self.record(out, Op::Exp(a.0), &[a.0])
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, a: Var) -> Var {
        let eps = self.eps;
        let out = self.val(a).map(|x| x.max(eps).ln());
        self.record(out, Op::Log(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::tanh);
        self.record(out, Op::Tanh(a.0), &[a.0])
    }

    /// `sqrt(max(x, 0))`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.max(0.0).sqrt());
        self.record(out, Op::Sqrt(a.0), &[a.0])
    }

    fn row_reduce(&mut self, a: Var, f: impl Fn(&[f64]) -> f64, node: Op) -> Result<Var, KernelError> {
        let ta = self.val(a);
        if ta.rank() == 0 {
            return Err(rank_err("row_reduce", 1, ta));
        }
        let data = ta.rows().map(f).collect();
        let out = Tensor::from_parts(leading(ta.shape()), data);
        Ok(self.record(out, node, &[a.0]))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var, KernelError> {
        self.row_reduce(a, |r| r.iter().sum(), Op::RowSum(a.0))
    }

    pub fn row_mean(&mut self, a: Var) -> Result<Var, KernelError> {
        self.row_reduce(a, row_mean, Op::RowMean(a.0))
    }

    /// Population variance of each row.
    pub fn row_var(&mut self, a: Var) -> Result<Var, KernelError> {
        self.row_reduce(a, row_var, Op::RowVar(a.0))
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, KernelError> {
        self.row_reduce(a, |r| r.iter().map(|x| x * x).sum::<f64>().sqrt(), Op::RowNorm(a.0))
    }

    /// Row softmax over `[g, n, n]` excluding the diagonal; the diagonal is 0.
    pub fn softmax_offdiag(&mut self, a: Var) -> Result<Var, KernelError> {
        let ta = self.val(a);
        if ta.rank() != 3 || ta.shape()[1] != ta.shape()[2] {
            return Err(rank_err("softmax_offdiag", 3, ta));
        }
        let n = ta.shape()[1];
        if n < 2 {
            return Err(KernelError::Shape {
                op: "softmax_offdiag",
                left: ta.shape().to_vec(),
                right: vec![2],
            });
        }
        let mut data = vec![0.0; ta.numel()];
        for (r, row) in ta.rows().enumerate() {
            let i = r % n;
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut total = 0.0;
            for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
                if j != i {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, Op::SoftmaxOffDiag(a.0), &[a.0]))
    }

    /// Row log-softmax over `[g, n, n]` excluding the diagonal; the diagonal is 0.
    pub fn log_softmax_offdiag(&mut self, a: Var) -> Result<Var, KernelError> {
        let ta = self.val(a);
        if ta.rank() != 3 || ta.shape()[1] != ta.shape()[2] {
            return Err(rank_err("log_softmax_offdiag", 3, ta));
        }
        let n = ta.shape()[1];
        if n < 2 {
            return Err(KernelError::Shape {
                op: "log_softmax_offdiag",
                left: ta.shape().to_vec(),
                right: vec![2],
            });
        }
        let mut data = vec![0.0; ta.numel()];
        for (r, row) in ta.rows().enumerate() {
            let i = r % n;
            let off = || row.iter().enumerate().filter(move |&(j, _)| j != i).map(|(_, &x)| x);
            let max = off().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + off().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (j, (&x, o)) in row.iter().zip(&mut data[r * n..(r + 1) * n]).enumerate() {
                if j != i {
                    *o = x - lse;
                }
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.record(out, Op::LogSoftmaxOffDiag(a.0), &[a.0]))
    }

    /// Elementwise `ln(exp(a) + exp(b))`.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("logaddexp", ta, tb));
        }
        let out = zip(ta, tb, |x, y| {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        });
        Ok(self.record(out, Op::LogAddExp(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).data().iter().sum());
        self.record(out, Op::SumAll(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.record(out, Op::MeanAll(a.0), &[a.0])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, KernelError> {
        if root.0 >= self.nodes.len() {
            return Err(KernelError::NotOnTape {
                index: root.0,
                len: self.nodes.len(),
            });
        }
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(KernelError::NotScalar {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(root_val.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let v = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, delta: Tensor| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, v(*b), |x, y| x * y));
                acc(*b, zip(g, v(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, Tensor::from_parts(v(*a).shape().to_vec(), g.data().to_vec()))
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                let rv = v(*r).data();
                let ga = g
                    .rows()
                    .flat_map(|row| row.iter().zip(rv).map(|(x, y)| x * y))
                    .collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), ga));
                acc(*r, col_sums(&zip(g, v(*a), |x, y| x * y)));
            }
            Op::SubCol(a, c) => {
                acc(*a, g.clone());
                let gc = g.rows().map(|row| -row.iter().sum::<f64>()).collect();
                acc(*c, Tensor::from_parts(v(*c).shape().to_vec(), gc));
            }
            Op::DivCol(a, c) => {
                let eps = self.eps;
                let cv = v(*c).data();
                let ga = g
                    .rows()
                    .zip(cv)
                    .flat_map(|(row, &cc)| row.iter().map(move |&x| x / cc.max(eps)))
                    .collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), ga));
                let gc = g
                    .rows()
                    .zip(v(*a).rows())
                    .zip(cv)
                    .map(|((grow, arow), &cc)| {
                        if cc > eps {
                            -grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>() / (cc * cc)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*c, Tensor::from_parts(v(*c).shape().to_vec(), gc));
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (v(*a), v(*w));
                let (k, m) = (tw.shape()[0], tw.shape()[1]);
                let n = ta.n_rows();
                let wt = tw.transpose().expect("rank-2 weight");
                let ga = matmul_raw(g.data(), wt.data(), n, m, k);
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
                let at = Tensor::from_parts(vec![n, k], ta.data().to_vec())
                    .transpose()
                    .expect("rank-2 view");
                let gw = matmul_raw(at.data(), g.data(), k, n, m);
                acc(*w, Tensor::from_parts(vec![k, m], gw));
            }
            Op::BmmNt(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (gs, n, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let m = tb.shape()[1];
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for gi in 0..gs {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[(gi * n + i) * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let ao = (gi * n + i) * d;
                            let bo = (gi * m + j) * d;
                            for p in 0..d {
                                ga[ao + p] += gij * tb.data()[bo + p];
                                gb[bo + p] += gij * ta.data()[ao + p];
                            }
                        }
                    }
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::TransposeLast2(a) => acc(*a, transpose3(g)),
            Op::Select1(a, index) => {
                let ta = v(*a);
                let (b, t, d) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let mut ga = vec![0.0; ta.numel()];
                for bi in 0..b {
                    ga[(bi * t + index) * d..(bi * t + index + 1) * d]
                        .copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = v(p).numel();
                    acc(p, Tensor::from_parts(v(p).shape().to_vec(), g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Exp(a) => acc(*a, zip(g, out, |x, y| x * y)),
            Op::Log(a) => {
                let eps = self.eps;
                acc(*a, zip(g, v(*a), |x, y| if y > eps { x / y } else { 0.0 }));
            }
            Op::Tanh(a) => acc(*a, zip(g, out, |x, y| x * (1.0 - y * y))),
            Op::Sqrt(a) => acc(*a, zip(g, out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 })),
            Op::RowSum(a) => acc(*a, spread_rows(v(*a), g, |_, _, gv| gv)),
            Op::RowMean(a) => {
                let len = v(*a).row_len() as f64;
                acc(*a, spread_rows(v(*a), g, |_, _, gv| gv / len));
            }
            Op::RowVar(a) => {
                let len = v(*a).row_len() as f64;
                acc(
                    *a,
                    spread_rows(v(*a), g, |row, x, gv| 2.0 * (x - row_mean(row)) / len * gv),
                );
            }
            Op::RowNorm(a) => {
                let ta = v(*a);
                let ga = ta
                    .rows()
                    .zip(out.data())
                    .zip(g.data())
                    .flat_map(|((row, &nrm), &gv)| {
                        row.iter().map(move |&x| if nrm > 0.0 { gv * x / nrm } else { 0.0 })
                    })
                    .collect();
                acc(*a, Tensor::from_parts(ta.shape().to_vec(), ga));
            }
            Op::SoftmaxOffDiag(a) => {
                let n = out.shape()[1];
                let ga = out
                    .rows()
                    .zip(g.rows())
                    .flat_map(|(yrow, grow)| {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                        yrow.iter().zip(grow).map(move |(y, gv)| y * (gv - dot))
                    })
                    .collect::<Vec<_>>();
                debug_assert_eq!(ga.len() % n, 0);
                acc(*a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::LogSoftmaxOffDiag(a) => {
                let n = out.shape()[1];
                let ga = out
                    .rows()
                    .zip(g.rows())
                    .enumerate()
                    .flat_map(|(r, (yrow, grow))| {
                        let i = r % n;
                        let total: f64 = grow.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, gv)| gv).sum();
                        yrow.iter()
                            .zip(grow)
                            .enumerate()
                            .map(move |(j, (y, gv))| if j == i { 0.0 } else { gv - y.exp() * total })
                    })
                    .collect::<Vec<_>>();
                acc(*a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            Op::LogAddExp(a, b) => {
                let wa = zip(v(*a), out, |x, o| (x - o).exp());
                let wb = zip(v(*b), out, |x, o| (x - o).exp());
                acc(*a, zip(g, &wa, |x, y| x * y));
                acc(*b, zip(g, &wb, |x, y| x * y));
            }
            Op::SumAll(a) => acc(*a, Tensor::filled(v(*a).shape(), g.data()[0])),
            Op::MeanAll(a) => {
                let n = v(*a).numel() as f64;
                acc(*a, Tensor::filled(v(*a).shape(), g.data()[0] / n));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut sums = vec![0.0; g.row_len()];
    for row in g.rows() {
        for (s, x) in sums.iter_mut().zip(row) {
            *s += x;
        }
    }
    Tensor::vector(sums)
}

/// Broadcasts a per-row adjoint back over the row through `f(row, x, g_row)`.
fn spread_rows(a: &Tensor, g: &Tensor, f: impl Fn(&[f64], f64, f64) -> f64) -> Tensor {
    let data = a
        .rows()
        .zip(g.data())
        .flat_map(|(row, &gv)| row.iter().map(move |&x| (row, x, gv)))
        .map(|(row, x, gv)| f(row, x, gv))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn transpose3(t: &Tensor) -> Tensor {
    let (g, n, m) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = vec![0.0; t.numel()];
    for gi in 0..g {
        for i in 0..n {
            for j in 0..m {
                data[(gi * m + j) * n + i] = t.data()[(gi * n + i) * m + j];
            }
        }
    }
    Tensor::from_parts(vec![g, m, n], data)
}

fn row_mean(r: &[f64]) -> f64 {
    r.iter().sum::<f64>() / r.len() as f64
}

fn row_var(r: &[f64]) -> f64 {
    let mu = row_mean(r);
    r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / r.len() as f64
}

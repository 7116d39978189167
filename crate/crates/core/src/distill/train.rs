use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, StudentMetric, Variant};
use super::optim::Optimizer;
use super::student::{student_forward_var, StudentNet};
use super::DistillError;
use crate::heads::{head_forward_var, init_head, HeadParams};
use crate::metrics::{gram_orthogonality, GramSide};
use crate::numkernel::{KernelError, Tape, Tensor, Var};
use crate::simgeom::{cosine_set_loss_var, dim_red_from_outputs, l2_set_loss_var, TemperatureSet};
use crate::synthdata::{stack_tokens, Dataset, SyntheticTeacher};

/// Paired student inputs `[n, t, d_in]` and teacher outputs `[n, t, D_T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    inputs: Tensor,
    teacher: Tensor,
}

pub type Batch = TrainData;

impl TrainData {
    pub fn new(inputs: Tensor, teacher: Tensor) -> Result<Self, DistillError> {
        if inputs.rank() != 3 || teacher.rank() != 3 || inputs.shape()[..2] != teacher.shape()[..2] {
            return Err(KernelError::Shape {
                op: "train_data",
                left: inputs.shape().to_vec(),
                right: teacher.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { inputs, teacher })
    }

    /// Runs the frozen teacher once over every sample of `dataset`.
    pub fn from_dataset(dataset: &Dataset, teacher: &SyntheticTeacher) -> Result<Self, DistillError> {
        let inputs = stack_tokens(dataset.samples().iter().map(|(t, _)| t))?;
        let outputs = teacher.forward_stack(&inputs)?;
        Self::new(inputs, outputs)
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn teacher(&self) -> &Tensor {
        &self.teacher
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_tokens(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn d_teacher(&self) -> usize {
        self.teacher.shape()[2]
    }

    /// Gathers the given samples, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let gather = |t: &Tensor| {
            let per = t.shape()[1] * t.shape()[2];
            let mut data = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(vec![idx.len(), t.shape()[1], t.shape()[2]], data).expect("gathered sizes match")
        };
        Self {
            inputs: gather(&self.inputs),
            teacher: gather(&self.teacher),
        }
    }
}

/// Loss values of one step or the mean over an epoch. Absent terms belong
/// to the other method.
///
/// `total` is `dim_red + student` for frozen TinTeM, `gamma * dim_red +
/// student` for weighted TinTeM and `feature_l2 + class_l2` for Proteus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dim_red: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub student: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_l2: Option<f64>,
    pub total: f64,
}

impl LossComponents {
    fn check_finite(&self) -> Result<(), DistillError> {
        let all = [self.dim_red, self.student, self.feature_l2, self.class_l2, Some(self.total)];
        if all.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DistillError::NonFinite(format!("{self:?}")))
        }
    }

    fn accumulate(&mut self, other: &LossComponents) {
        let add = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        };
        add(&mut self.dim_red, other.dim_red);
        add(&mut self.student, other.student);
        add(&mut self.feature_l2, other.feature_l2);
        add(&mut self.class_l2, other.class_l2);
        self.total += other.total;
    }

    fn scaled(&self, c: f64) -> Self {
        let s = |v: Option<f64>| v.map(|x| x * c);
        Self {
            dim_red: s(self.dim_red),
            student: s(self.student),
            feature_l2: s(self.feature_l2),
            class_l2: s(self.class_l2),
            total: self.total * c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGram {
    pub head: String,
    pub wtw: f64,
    pub wwt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub gram: Vec<HeadGram>,
}

/// One record per completed epoch, plus wall-clock seconds per epoch.
///
/// Wall-clock is kept out of [`TrainHistory::to_jsonl`] so history files are
/// reproducible; [`TrainHistory::timings_jsonl`] writes it separately.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_clock_s: Vec<f64>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            records,
            wall_clock_s: Vec::new(),
        })
    }

    pub fn timings_jsonl(&self) -> String {
        self.wall_clock_s
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{{\"epoch\":{},\"wall_clock_s\":{s}}}\n", i + 1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModels {
    Tintem {
        head: HeadParams,
        student: StudentNet,
    },
    Proteus {
        /// Raises every token, `g_phi`.
        head_feature: HeadParams,
        /// Raises the class token, `g_psi`.
        head_class: HeadParams,
        student: StudentNet,
    },
}

impl TrainedModels {
    pub fn init(cfg: &DistillConfig, d_in: usize, d_teacher: usize) -> Result<Self, DistillError> {
        let student = StudentNet::new(d_in, cfg.student_hidden, cfg.d_student, cfg.student_seed)?;
        Ok(match cfg.variant {
            Variant::Proteus => TrainedModels::Proteus {
                head_feature: init_head(cfg.d_student, d_teacher, cfg.head_norm, cfg.head_seed)?,
                head_class: init_head(cfg.d_student, d_teacher, cfg.head_norm, cfg.head_seed.wrapping_add(1))?,
                student,
            },
            _ => TrainedModels::Tintem {
                head: init_head(d_teacher, cfg.d_student, cfg.head_norm, cfg.head_seed)?,
                student,
            },
        })
    }

    pub fn student(&self) -> &StudentNet {
        match self {
            TrainedModels::Tintem { student, .. } | TrainedModels::Proteus { student, .. } => student,
        }
    }

    /// Heads with stable names: `teacher_head`, or `head_feature` and `head_class`.
    pub fn heads(&self) -> Vec<(&'static str, &HeadParams)> {
        match self {
            TrainedModels::Tintem { head, .. } => vec![("teacher_head", head)],
            TrainedModels::Proteus {
                head_feature,
                head_class,
                ..
            } => vec![("head_feature", head_feature), ("head_class", head_class)],
        }
    }

    pub fn gram_scores(&self) -> Result<Vec<HeadGram>, DistillError> {
        self.heads()
            .into_iter()
            .map(|(name, h)| {
                Ok(HeadGram {
                    head: name.into(),
                    wtw: gram_orthogonality(&h.weight, GramSide::Wtw)?.score,
                    wwt: gram_orthogonality(&h.weight, GramSide::Wwt)?.score,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TintemOptim {
    pub head: Optimizer,
    pub student: Optimizer,
}

impl TintemOptim {
    pub fn new(cfg: &DistillConfig, head: &HeadParams, student: &StudentNet) -> Self {
        Self {
            head: Optimizer::for_tensors(cfg.optimizer, cfg.head_lr, [&head.gamma, &head.beta1, &head.weight, &head.beta2]),
            student: Optimizer::for_tensors(cfg.optimizer, cfg.student_lr, [&student.w1, &student.b1, &student.w2, &student.b2]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProteusOptim {
    /// State for both heads, feature head first.
    pub heads: Optimizer,
    pub student: Optimizer,
}

impl ProteusOptim {
    pub fn new(cfg: &DistillConfig, head_feature: &HeadParams, head_class: &HeadParams, student: &StudentNet) -> Self {
        let heads = [head_feature, head_class]
            .into_iter()
            .flat_map(|h| [&h.gamma, &h.beta1, &h.weight, &h.beta2]);
        Self {
            heads: Optimizer::for_tensors(cfg.optimizer, cfg.head_lr, heads),
            student: Optimizer::for_tensors(cfg.optimizer, cfg.student_lr, [&student.w1, &student.b1, &student.w2, &student.b2]),
        }
    }
}

fn dim_err(context: &str, expected: usize, got: usize) -> DistillError {
    DistillError::Dimension {
        context: context.into(),
        expected,
        got,
    }
}

fn check_batch(batch: &Batch) -> Result<(), DistillError> {
    if batch.len() < 2 {
        return Err(DistillError::Config(format!("batch needs at least 2 samples, got {}", batch.len())));
    }
    Ok(())
}

fn check_tintem(batch: &Batch, head: &HeadParams, student: &StudentNet) -> Result<(), DistillError> {
    check_batch(batch)?;
    if head.d_in() != batch.d_teacher() {
        return Err(dim_err("teacher head input", head.d_in(), batch.d_teacher()));
    }
    if student.d_in() != batch.d_in() {
        return Err(dim_err("student input", student.d_in(), batch.d_in()));
    }
    if student.d_out() != head.d_out() {
        return Err(dim_err("student output vs teacher head output", head.d_out(), student.d_out()));
    }
    Ok(())
}

fn set_loss(tape: &mut Tape, metric: StudentMetric, z: Var, y: Var) -> Result<Var, KernelError> {
    match metric {
        StudentMetric::Cosine => cosine_set_loss_var(tape, z, y),
        StudentMetric::Mse => l2_set_loss_var(tape, z, y),
    }
}

/// Class-token term plus, with `feature_term`, the same loss over every token
/// of the batch. `z` and `y` are `[b, t, d]`.
fn student_term(tape: &mut Tape, metric: StudentMetric, z: Var, y: Var, feature_term: bool) -> Result<Var, KernelError> {
    let zc = tape.select1(z, 0)?;
    let yc = tape.select1(y, 0)?;
    let class = set_loss(tape, metric, zc, yc)?;
    if !feature_term {
        return Ok(class);
    }
    let shape = tape.value(z).shape().to_vec();
    let flat = [shape[0] * shape[1], shape[2]];
    let zf = tape.reshape(z, &flat)?;
    let yf = tape.reshape(y, &flat)?;
    let feature = set_loss(tape, metric, zf, yf)?;
    tape.add(class, feature)
}

/// Records the TinTeM objective. Returns `(dim_red, student, total)`.
#[allow(clippy::too_many_arguments)]
fn tintem_objective(
    tape: &mut Tape,
    batch: &Batch,
    head: &crate::heads::HeadVars,
    student: &super::student::StudentVars,
    temps: &TemperatureSet,
    metric: StudentMetric,
    feature_term: bool,
    weight: Option<f64>,
) -> Result<(Var, Var, Var), KernelError> {
    let t = tape.constant(batch.teacher.clone());
    let x = tape.constant(batch.inputs.clone());
    let projected = head_forward_var(tape, head, t)?;
    let dim_red = dim_red_from_outputs(tape, t, projected, temps, feature_term)?;
    let target = match weight {
        None => tape.detach(projected),
        Some(_) => projected,
    };
    let s = student_forward_var(tape, student, x)?;
    let student_loss = student_term(tape, metric, s, target, feature_term)?;
    let weighted = match weight {
        None => dim_red,
        Some(g) => tape.scale(dim_red, g),
    };
    let total = tape.add(weighted, student_loss)?;
    Ok((dim_red, student_loss, total))
}

fn tintem_update(
    batch: &Batch,
    head: &mut HeadParams,
    student: &mut StudentNet,
    opt: &mut TintemOptim,
    cfg: &DistillConfig,
    weight: Option<f64>,
) -> Result<LossComponents, DistillError> {
    check_tintem(batch, head, student)?;
    let mut tape = Tape::new();
    let hv = head.register(&mut tape, true);
    let sv = student.register(&mut tape, true);
    let (dim_red, student_loss, total) = tintem_objective(
        &mut tape,
        batch,
        &hv,
        &sv,
        &cfg.temperatures,
        cfg.student_metric,
        cfg.feature_term,
        weight,
    )?;
    let losses = LossComponents {
        dim_red: Some(tape.scalar(dim_red)?),
        student: Some(tape.scalar(student_loss)?),
        total: tape.scalar(total)?,
        ..LossComponents::default()
    };
    losses.check_finite()?;
    let grads = tape.backward(total)?;
    let hg = hv.params().map(|v| grads.wrt(v));
    let sg = sv.params().map(|v| grads.wrt(v));
    opt.head.step(&mut head.tensors_mut(), &hg);
    opt.student.step(&mut student.tensors_mut(), &sg);
    Ok(losses)
}

/// One frozen-gradient TinTeM update: the head moves along the similarity
/// loss only, the student along its loss against the detached head output.
pub fn tintem_step(
    batch: &Batch,
    head: &mut HeadParams,
    student: &mut StudentNet,
    opt: &mut TintemOptim,
    cfg: &DistillConfig,
) -> Result<LossComponents, DistillError> {
    tintem_update(batch, head, student, opt, cfg, None)
}

/// One update on `gamma * dim_red + student` with gradients of both terms
/// reaching the head.
pub fn tintem_weighted_step(
    batch: &Batch,
    head: &mut HeadParams,
    student: &mut StudentNet,
    gamma: f64,
    opt: &mut TintemOptim,
    cfg: &DistillConfig,
) -> Result<LossComponents, DistillError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(DistillError::Config(format!("gamma must be finite and > 0, got {gamma}")));
    }
    tintem_update(batch, head, student, opt, cfg, Some(gamma))
}

/// One Proteus update on the all-token and class-token L2 terms, moving both
/// heads and the student together.
pub fn proteus_step(
    batch: &Batch,
    head_feature: &mut HeadParams,
    head_class: &mut HeadParams,
    student: &mut StudentNet,
    opt: &mut ProteusOptim,
    cfg: &DistillConfig,
) -> Result<LossComponents, DistillError> {
    check_batch(batch)?;
    if student.d_in() != batch.d_in() {
        return Err(dim_err("student input", student.d_in(), batch.d_in()));
    }
    for h in [&*head_feature, &*head_class] {
        if h.d_in() != student.d_out() {
            return Err(dim_err("student head input", student.d_out(), h.d_in()));
        }
        if h.d_out() != batch.d_teacher() {
            return Err(dim_err("student head output", batch.d_teacher(), h.d_out()));
        }
    }
    let mut tape = Tape::new();
    let fv = head_feature.register(&mut tape, true);
    let cv = head_class.register(&mut tape, true);
    let sv = student.register(&mut tape, true);
    let (feature, class, total) = proteus_objective(&mut tape, batch, &fv, &cv, &sv, cfg.feature_term)?;
    let losses = LossComponents {
        feature_l2: feature.map(|v| tape.scalar(v)).transpose()?,
        class_l2: Some(tape.scalar(class)?),
        total: tape.scalar(total)?,
        ..LossComponents::default()
    };
    losses.check_finite()?;
    let grads = tape.backward(total)?;
    let hg: Vec<Tensor> = fv.params().into_iter().chain(cv.params()).map(|v| grads.wrt(v)).collect();
    let sg = sv.params().map(|v| grads.wrt(v));
    let [a, b, c, d] = head_feature.tensors_mut();
    let [e, f, g, h] = head_class.tensors_mut();
    opt.heads.step(&mut [a, b, c, d, e, f, g, h], &hg);
    opt.student.step(&mut student.tensors_mut(), &sg);
    Ok(losses)
}

fn proteus_objective(
    tape: &mut Tape,
    batch: &Batch,
    head_feature: &crate::heads::HeadVars,
    head_class: &crate::heads::HeadVars,
    student: &super::student::StudentVars,
    feature_term: bool,
) -> Result<(Option<Var>, Var, Var), KernelError> {
    let t = tape.constant(batch.teacher.clone());
    let x = tape.constant(batch.inputs.clone());
    let s = student_forward_var(tape, student, x)?;
    let sc = tape.select1(s, 0)?;
    let tc = tape.select1(t, 0)?;
    let raised_class = head_forward_var(tape, head_class, sc)?;
    let class = l2_set_loss_var(tape, raised_class, tc)?;
    if !feature_term {
        return Ok((None, class, class));
    }
    let raised = head_forward_var(tape, head_feature, s)?;
    let rows = batch.len() * batch.n_tokens();
    let rf = tape.reshape(raised, &[rows, batch.d_teacher()])?;
    let tf = tape.reshape(t, &[rows, batch.d_teacher()])?;
    let feature = l2_set_loss_var(tape, rf, tf)?;
    let total = tape.add(feature, class)?;
    Ok((Some(feature), class, total))
}

/// Full objective of the configured variant as a function of every
/// trainable parameter, for gradient checking. Parameters are laid out as in
/// [`TrainedModels::flat_params`].
pub(crate) fn objective_var(
    tape: &mut Tape,
    models: &TrainedModels,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<(Vec<Var>, Var), KernelError> {
    match models {
        TrainedModels::Tintem { head, student } => {
            let hv = head.register(tape, true);
            let sv = student.register(tape, true);
            let weight = match cfg.variant {
                Variant::TintemWeighted { gamma } => Some(gamma),
                _ => None,
            };
            let (_, _, total) = tintem_objective(
                tape,
                batch,
                &hv,
                &sv,
                &cfg.temperatures,
                cfg.student_metric,
                cfg.feature_term,
                weight,
            )?;
            Ok((hv.params().into_iter().chain(sv.params()).collect(), total))
        }
        TrainedModels::Proteus {
            head_feature,
            head_class,
            student,
        } => {
            let fv = head_feature.register(tape, true);
            let cv = head_class.register(tape, true);
            let sv = student.register(tape, true);
            let (_, _, total) = proteus_objective(tape, batch, &fv, &cv, &sv, cfg.feature_term)?;
            Ok((fv.params().into_iter().chain(cv.params()).chain(sv.params()).collect(), total))
        }
    }
}

impl TrainedModels {
    /// Every trainable tensor, heads first, in the order the steps update them.
    pub fn flat_params(&self) -> Vec<&Tensor> {
        fn head(h: &HeadParams) -> [&Tensor; 4] {
            [&h.gamma, &h.beta1, &h.weight, &h.beta2]
        }
        fn student(s: &StudentNet) -> [&Tensor; 4] {
            [&s.w1, &s.b1, &s.w2, &s.b2]
        }
        match self {
            TrainedModels::Tintem { head: h, student: s } => head(h).into_iter().chain(student(s)).collect(),
            TrainedModels::Proteus {
                head_feature,
                head_class,
                student: s,
            } => head(head_feature).into_iter().chain(head(head_class)).chain(student(s)).collect(),
        }
    }

    pub(crate) fn flat_params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TrainedModels::Tintem { head, student } => {
                head.tensors_mut().into_iter().chain(student.tensors_mut()).collect()
            }
            TrainedModels::Proteus {
                head_feature,
                head_class,
                student,
            } => head_feature
                .tensors_mut()
                .into_iter()
                .chain(head_class.tensors_mut())
                .chain(student.tensors_mut())
                .collect(),
        }
    }

    /// Value of the configured objective on `batch` without updating anything.
    pub fn objective(&self, batch: &Batch, cfg: &DistillConfig) -> Result<f64, DistillError> {
        let mut tape = Tape::new();
        let (_, total) = objective_var(&mut tape, self, batch, cfg)?;
        Ok(tape.scalar(total)?)
    }

    /// Objective value and its gradient for every tensor of [`Self::flat_params`].
    pub fn objective_grad(&self, batch: &Batch, cfg: &DistillConfig) -> Result<(f64, Vec<Tensor>), DistillError> {
        let mut tape = Tape::new();
        let (params, total) = objective_var(&mut tape, self, batch, cfg)?;
        let grads = tape.backward(total)?;
        Ok((tape.scalar(total)?, params.into_iter().map(|v| grads.wrt(v)).collect()))
    }

    /// Returns a copy with `delta` added to coordinate `index` of the flattened
    /// parameter vector.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let mut k = index;
        for t in out.flat_params_mut() {
            if k < t.numel() {
                t.data_mut()[k] += delta;
                return out;
            }
            k -= t.numel();
        }
        panic!("parameter index {index} out of range");
    }
}

pub struct TrainOutput {
    pub initial: TrainedModels,
    pub models: TrainedModels,
    pub history: TrainHistory,
}

enum Optims {
    Tintem(TintemOptim),
    Proteus(ProteusOptim),
}

fn step(models: &mut TrainedModels, optims: &mut Optims, batch: &Batch, cfg: &DistillConfig) -> Result<LossComponents, DistillError> {
    match (models, optims) {
        (TrainedModels::Tintem { head, student }, Optims::Tintem(opt)) => match cfg.variant {
            Variant::TintemWeighted { gamma } => tintem_weighted_step(batch, head, student, gamma, opt, cfg),
            _ => tintem_step(batch, head, student, opt, cfg),
        },
        (
            TrainedModels::Proteus {
                head_feature,
                head_class,
                student,
            },
            Optims::Proteus(opt),
        ) => proteus_step(batch, head_feature, head_class, student, opt, cfg),
        _ => unreachable!("optimizer state follows the model kind"),
    }
}

/// Trains on teacher outputs computed once from `dataset`.
pub fn train(dataset: &Dataset, teacher: &SyntheticTeacher, cfg: &DistillConfig) -> Result<TrainOutput, DistillError> {
    train_on(&TrainData::from_dataset(dataset, teacher)?, cfg)
}

/// Epoch loop over shuffled mini-batches. Each epoch draws its permutation
/// from its own stream of `shuffle_seed`; a trailing batch with fewer than 2
/// samples is skipped.
pub fn train_on(data: &TrainData, cfg: &DistillConfig) -> Result<TrainOutput, DistillError> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(DistillError::Config(format!("need at least 2 training samples, got {}", data.len())));
    }
    if cfg.feature_term && data.n_tokens() < 2 {
        return Err(DistillError::Config("the feature term needs at least one patch token per sample".into()));
    }
    let initial = TrainedModels::init(cfg, data.d_in(), data.d_teacher())?;
    let mut models = initial.clone();
    let mut optims = match &models {
        TrainedModels::Tintem { head, student } => Optims::Tintem(TintemOptim::new(cfg, head, student)),
        TrainedModels::Proteus {
            head_feature,
            head_class,
            student,
        } => Optims::Proteus(ProteusOptim::new(cfg, head_feature, head_class, student)),
    };
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("epoch {epoch}: skipping trailing batch of {}", chunk.len());
                continue;
            }
            let batch = data.select(chunk);
            let losses = step(&mut models, &mut optims, &batch, cfg).map_err(|e| DistillError::Step {
                epoch,
                batch: b,
                source: Box::new(e),
            })?;
            sum.accumulate(&losses);
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            losses: sum.scaled(1.0 / batches as f64),
            gram: models.gram_scores()?,
        };
        log::info!("{} epoch {epoch}: total {:.6}", cfg.variant.name(), record.losses.total);
        history.records.push(record);
        history.wall_clock_s.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutput {
        initial,
        models,
        history,
    })
}

/// Mean similarity loss of `head` over consecutive batches of the teacher
/// outputs `[n, t, D_T]`, in sample order.
pub fn evaluate_dim_red(teacher: &Tensor, head: &HeadParams, cfg: &DistillConfig) -> Result<f64, DistillError> {
    if teacher.rank() != 3 || teacher.shape()[2] != head.d_in() {
        return Err(dim_err("teacher outputs", head.d_in(), teacher.shape().last().copied().unwrap_or(0)));
    }
    let (n, t, d) = (teacher.shape()[0], teacher.shape()[1], teacher.shape()[2]);
    let per = t * d;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while n - start >= 2 {
        let end = (start + cfg.batch_size).min(n);
        let chunk = Tensor::new(vec![end - start, t, d], teacher.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let hv = head.register(&mut tape, false);
        let tv = tape.constant(chunk);
        let loss = crate::simgeom::dim_red_loss_var(&mut tape, tv, &hv, &cfg.temperatures, cfg.feature_term)?;
        total += tape.scalar(loss)?;
        count += 1;
        start = end;
    }
    if count == 0 {
        return Err(DistillError::Config("need at least 2 samples to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::OptimizerConfig;
    use crate::heads::NormMode;
    use crate::synthdata::{gen_token_dataset, DatasetSpec, TeacherSpec};

    fn small_data(n: usize, seed: u64) -> (Dataset, SyntheticTeacher) {
        let ds = gen_token_dataset(&DatasetSpec {
            n_samples: n,
            n_classes: 3,
            d_in: 6,
            n_patch: 2,
            class_separation: 3.0,
            seed,
        })
        .unwrap();
        let teacher = SyntheticTeacher::new(&TeacherSpec {
            d_in: 6,
            hidden: 10,
            d_out: 8,
            class_offset_scale: 1.0,
            seed: seed + 100,
        })
        .unwrap();
        (ds, teacher)
    }

    fn small_cfg(variant: Variant) -> DistillConfig {
        DistillConfig {
            variant,
            batch_size: 8,
            epochs: 3,
            d_student: 4,
            student_hidden: 6,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (ds, teacher) = small_data(20, 1);
        for v in [Variant::TintemFrozen, Variant::Proteus] {
            let cfg = DistillConfig {
                epochs: 0,
                ..small_cfg(v)
            };
            let out = train(&ds, &teacher, &cfg).unwrap();
            assert_eq!(out.models, out.initial);
            assert!(out.history.records.is_empty());
        }
    }

    #[test]
    fn training_is_deterministic_and_teacher_untouched() {
        let (ds, teacher) = small_data(30, 2);
        let before = teacher.to_checkpoint().to_bytes();
        for v in [Variant::TintemFrozen, Variant::TintemWeighted { gamma: 10.0 }, Variant::Proteus] {
            let cfg = small_cfg(v);
            let a = train(&ds, &teacher, &cfg).unwrap();
            let b = train(&ds, &teacher, &cfg).unwrap();
            assert_eq!(a.history.to_jsonl(), b.history.to_jsonl());
            assert_eq!(a.models, b.models);
            assert_eq!(a.history.records.len(), 3);
            assert!(a.history.records.iter().enumerate().all(|(i, r)| r.epoch == i + 1));
            let parsed = TrainHistory::from_jsonl(&a.history.to_jsonl()).unwrap();
            assert_eq!(parsed.records, a.history.records);
        }
        assert_eq!(teacher.to_checkpoint().to_bytes(), before);
    }

    #[test]
    fn loss_components_sum_to_total() {
        let (ds, teacher) = small_data(30, 3);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let batch = data.select(&(0..10).collect::<Vec<_>>());
        for v in [Variant::TintemFrozen, Variant::TintemWeighted { gamma: 7.0 }, Variant::Proteus] {
            let cfg = small_cfg(v);
            let mut models = TrainedModels::init(&cfg, 6, 8).unwrap();
            let expected = models.objective(&batch, &cfg).unwrap();
            let l = match &mut models {
                TrainedModels::Tintem { head, student } => {
                    let mut opt = TintemOptim::new(&cfg, head, student);
                    match v {
                        Variant::TintemWeighted { gamma } => {
                            let l = tintem_weighted_step(&batch, head, student, gamma, &mut opt, &cfg).unwrap();
                            assert!((l.total - (gamma * l.dim_red.unwrap() + l.student.unwrap())).abs() < 1e-12);
                            l
                        }
                        _ => {
                            let l = tintem_step(&batch, head, student, &mut opt, &cfg).unwrap();
                            assert!((l.total - (l.dim_red.unwrap() + l.student.unwrap())).abs() < 1e-12);
                            l
                        }
                    }
                }
                TrainedModels::Proteus {
                    head_feature,
                    head_class,
                    student,
                } => {
                    let mut opt = ProteusOptim::new(&cfg, head_feature, head_class, student);
                    let l = proteus_step(&batch, head_feature, head_class, student, &mut opt, &cfg).unwrap();
                    assert!((l.total - (l.feature_l2.unwrap() + l.class_l2.unwrap())).abs() < 1e-12);
                    l
                }
            };
            assert_eq!(l.total, expected);
        }
    }

    #[test]
    fn frozen_variant_isolates_gradients() {
        let (ds, teacher) = small_data(40, 4);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let batch = data.select(&(0..16).collect::<Vec<_>>());
        let base = small_cfg(Variant::TintemFrozen);
        let init = TrainedModels::init(&base, 6, 8).unwrap();
        let TrainedModels::Tintem { head: h0, student: s0 } = init else {
            unreachable!()
        };
        // Student lr 0: student bitwise unchanged, head moves.
        let cfg = DistillConfig { student_lr: 0.0, ..base.clone() };
        let (mut h, mut s) = (h0.clone(), s0.clone());
        let mut opt = TintemOptim::new(&cfg, &h, &s);
        for _ in 0..5 {
            tintem_step(&batch, &mut h, &mut s, &mut opt, &cfg).unwrap();
        }
        assert_eq!(s, s0);
        assert_ne!(h.weight, h0.weight);
        // Head lr 0: head bitwise unchanged.
        let cfg = DistillConfig { head_lr: 0.0, ..base.clone() };
        let (mut h, mut s) = (h0.clone(), s0.clone());
        let mut opt = TintemOptim::new(&cfg, &h, &s);
        for _ in 0..5 {
            tintem_step(&batch, &mut h, &mut s, &mut opt, &cfg).unwrap();
        }
        assert_eq!(h, h0);
        assert_ne!(s, s0);
        // The head's update does not depend on the student: same head after a
        // run with a differently initialized student.
        let (mut ha, mut sa) = (h0.clone(), s0.clone());
        let mut sb = StudentNet::new(6, 6, 4, 99).unwrap();
        let mut hb = h0.clone();
        let mut oa = TintemOptim::new(&base, &ha, &sa);
        let mut ob = TintemOptim::new(&base, &hb, &sb);
        for _ in 0..3 {
            tintem_step(&batch, &mut ha, &mut sa, &mut oa, &base).unwrap();
            tintem_step(&batch, &mut hb, &mut sb, &mut ob, &base).unwrap();
        }
        assert_eq!(ha, hb);
    }

    #[test]
    fn student_loss_descends_with_fixed_target() {
        let (ds, teacher) = small_data(64, 5);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let batch = data.select(&(0..64).collect::<Vec<_>>());
        let cfg = DistillConfig {
            head_lr: 0.0,
            student_lr: 0.05,
            optimizer: OptimizerConfig::Sgd { momentum: 0.0 },
            ..small_cfg(Variant::TintemFrozen)
        };
        let TrainedModels::Tintem { mut head, mut student } = TrainedModels::init(&cfg, 6, 8).unwrap() else {
            unreachable!()
        };
        let mut opt = TintemOptim::new(&cfg, &head, &student);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let l = tintem_step(&batch, &mut head, &mut student, &mut opt, &cfg).unwrap();
            let s = l.student.unwrap();
            assert!(s <= prev + 1e-12, "{s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn huge_gamma_matches_pure_dim_red_training() {
        let (ds, teacher) = small_data(40, 6);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let batch = data.select(&(0..16).collect::<Vec<_>>());
        let gamma = 1e6;
        let sgd = OptimizerConfig::Sgd { momentum: 0.0 };
        let pure = DistillConfig {
            student_lr: 0.0,
            head_lr: 0.05,
            optimizer: sgd,
            ..small_cfg(Variant::TintemFrozen)
        };
        let weighted = DistillConfig {
            variant: Variant::TintemWeighted { gamma },
            head_lr: 0.05 / gamma,
            ..pure.clone()
        };
        let TrainedModels::Tintem { head: h0, student: s0 } = TrainedModels::init(&pure, 6, 8).unwrap() else {
            unreachable!()
        };
        let (mut ha, mut sa, mut hb, mut sb) = (h0.clone(), s0.clone(), h0, s0);
        let mut oa = TintemOptim::new(&pure, &ha, &sa);
        let mut ob = TintemOptim::new(&weighted, &hb, &sb);
        for _ in 0..10 {
            tintem_step(&batch, &mut ha, &mut sa, &mut oa, &pure).unwrap();
            tintem_weighted_step(&batch, &mut hb, &mut sb, gamma, &mut ob, &weighted).unwrap();
        }
        let diff = ha
            .weight
            .data()
            .iter()
            .zip(hb.weight.data())
            .chain(ha.gamma.data().iter().zip(hb.gamma.data()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn proteus_fits_constant_targets() {
        let (ds, _) = small_data(32, 7);
        let inputs = stack_tokens(ds.samples().iter().map(|(t, _)| t)).unwrap();
        let n = inputs.shape()[0];
        let teacher = Tensor::new(
            vec![n, 3, 8],
            (0..n * 3 * 8).map(|i| 0.5 - (i % 8) as f64 * 0.1).collect(),
        )
        .unwrap();
        let data = TrainData::new(inputs, teacher).unwrap();
        let cfg = DistillConfig {
            head_lr: 0.05,
            student_lr: 0.01,
            batch_size: 16,
            epochs: 150,
            head_norm: NormMode::LayerNorm,
            ..small_cfg(Variant::Proteus)
        };
        let out = train_on(&data, &cfg).unwrap();
        let first = out.history.records[0].losses.total;
        let last = out.history.records.last().unwrap().losses.total;
        // Constant targets have zero variance, so the floor is 0.
        assert!(last < 1e-3 * first.max(1e-3), "{first} -> {last}");
        let batch = data.select(&(0..16).collect::<Vec<_>>());
        let (_, grads) = out.models.objective_grad(&batch, &cfg).unwrap();
        let student_grad = grads[8..].iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!(student_grad < 1e-2, "{student_grad}");
    }

    #[test]
    fn step_errors_carry_context() {
        let (ds, teacher) = small_data(20, 8);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let cfg = small_cfg(Variant::TintemFrozen);
        let mut models = TrainedModels::init(&cfg, 6, 5).unwrap();
        let TrainedModels::Tintem { head, student } = &mut models else {
            unreachable!()
        };
        let mut opt = TintemOptim::new(&cfg, head, student);
        let batch = data.select(&[0, 1, 2]);
        assert!(matches!(
            tintem_step(&batch, head, student, &mut opt, &cfg),
            Err(DistillError::Dimension { .. })
        ));
        let one = data.select(&[0]);
        let mut models = TrainedModels::init(&cfg, 6, 8).unwrap();
        let TrainedModels::Tintem { head, student } = &mut models else {
            unreachable!()
        };
        assert!(tintem_step(&one, head, student, &mut opt, &cfg).is_err());
    }

    #[test]
    fn dim_red_evaluation_is_batch_mean() {
        let (ds, teacher) = small_data(20, 9);
        let data = TrainData::from_dataset(&ds, &teacher).unwrap();
        let cfg = DistillConfig {
            batch_size: 10,
            ..small_cfg(Variant::TintemFrozen)
        };
        let head = init_head(8, 4, NormMode::LayerNorm, 0).unwrap();
        let got = evaluate_dim_red(data.teacher(), &head, &cfg).unwrap();
        let ts: Vec<_> = ds.samples().iter().map(|(t, _)| teacher.teacher_forward(t).unwrap()).collect();
        let a = crate::simgeom::dim_red_loss(&ts[..10], &head, &cfg.temperatures, true).unwrap();
        let b = crate::simgeom::dim_red_loss(&ts[10..], &head, &cfg.temperatures, true).unwrap();
        assert!((got - (a + b) / 2.0).abs() < 1e-12);
    }
}

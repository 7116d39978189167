//! The generate, distill, evaluate pipeline and its report.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{seed_offset, ExperimentConfig};
use super::CliError;
use crate::distill::{evaluate_dim_red, train_on, LossComponents, TrainData, TrainOutput, TrainedModels, Variant};
use crate::heads::HeadParams;
use crate::metrics::{
    gram_density_data, gram_orthogonality, jl_angle_check, jl_construct, jl_norm_preservation_check, knn_accuracy,
    ood_evaluate, AngleCheck, GramSide, NormCheck,
};
use crate::numkernel::Tensor;
use crate::synthdata::{gen_token_dataset, load_embeddings, stack_tokens, SyntheticTeacher, TokenSet};

/// Student inputs and teacher outputs for every sample, with labels.
pub struct ExperimentData {
    pub data: TrainData,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub teacher: Option<SyntheticTeacher>,
    /// The input token sets as read or generated, in sample order.
    pub input_sets: Vec<(TokenSet, usize)>,
}

/// Builds the sample set named by the config's data and teacher sections.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData, CliError> {
    let input_sets = if let Some(spec) = cfg.dataset_spec() {
        gen_token_dataset(&spec)
            .map_err(|e| CliError::runtime("generating the synthetic dataset", e))?
            .samples()
            .to_vec()
    } else {
        let file = cfg.data.file.as_ref().expect("validated: one data source");
        let path = cfg.resolve(&file.inputs);
        load_embeddings(&path).map_err(|e| CliError::runtime(format!("reading {}", path.display()), e))?
    };
    if input_sets.is_empty() {
        return Err(CliError::Runtime("input embeddings are empty".into()));
    }
    let labels: Vec<usize> = input_sets.iter().map(|(_, l)| *l).collect();
    let inputs = stack_tokens(input_sets.iter().map(|(t, _)| t)).map_err(|e| CliError::runtime("stacking inputs", e))?;
    let d_in = inputs.shape()[2];
    let (teacher_out, teacher) = match cfg.teacher_spec(d_in) {
        Some(spec) => {
            let teacher = SyntheticTeacher::new(&spec).map_err(|e| CliError::runtime("building the teacher", e))?;
            let out = teacher.forward_stack(&inputs).map_err(|e| CliError::runtime("running the teacher", e))?;
            (out, Some(teacher))
        }
        None => {
            let file = cfg.data.file.as_ref().expect("validated: teacher source");
            let path = cfg.resolve(file.teacher_outputs.as_ref().expect("validated: teacher source"));
            let sets =
                load_embeddings(&path).map_err(|e| CliError::runtime(format!("reading {}", path.display()), e))?;
            if sets.len() != labels.len() || sets.iter().zip(&labels).any(|((_, a), b)| a != b) {
                return Err(CliError::Runtime(format!(
                    "{}: samples or labels differ from the input file",
                    path.display()
                )));
            }
            let out = stack_tokens(sets.iter().map(|(t, _)| t)).map_err(|e| CliError::runtime("stacking teacher outputs", e))?;
            (out, None)
        }
    };
    let data = TrainData::new(inputs, teacher_out).map_err(|e| CliError::runtime("pairing inputs with teacher outputs", e))?;
    let n_classes = cfg.n_classes().unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(ExperimentData {
        data,
        labels,
        n_classes,
        teacher,
        input_sets,
    })
}

/// Index sets of the held-out-class protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub ood_class: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub ood: Vec<usize>,
}

/// Holds out `ood_class` entirely, then splits the remaining samples into
/// train and test by a seeded shuffle. Index lists are sorted.
pub fn split_samples(labels: &[usize], ood_class: usize, test_fraction: f64, seed: u64) -> Result<Split, CliError> {
    let ood: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == ood_class).collect();
    let mut id: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ood_class).collect();
    if ood.is_empty() {
        return Err(CliError::Runtime(format!("OOD class {ood_class} has no samples")));
    }
    let n_test = ((id.len() as f64 * test_fraction).round() as usize).max(1);
    if id.len() < n_test + 2 {
        return Err(CliError::Runtime(format!(
            "{} in-distribution samples are too few for a {n_test}-sample test split",
            id.len()
        )));
    }
    id.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = id.split_off(id.len() - n_test);
    id.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        ood_class,
        train: id,
        test,
        ood,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnSummary {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub k: usize,
    pub fraction: f64,
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityEntry {
    pub head: String,
    pub side: GramSide,
    pub alpha: f64,
    pub score: f64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEntry {
    pub head: String,
    pub side: GramSide,
    pub diagonal: Vec<f64>,
    pub off_diagonal: Vec<f64>,
}

/// Embedding quality of one representation of the class tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub knn: KnnSummary,
    pub ood: OodSummary,
}

/// A random normal projection of the teacher class tokens to the student
/// dimension, plus the norm and angle checks at the same sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JlSummary {
    pub d: usize,
    pub m: usize,
    pub knn: KnnSummary,
    pub ood: OodSummary,
    pub norm: NormCheck,
    pub angle: AngleCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimRedSummary {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub d_teacher: usize,
    pub d_student: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub ood_class: usize,
    pub orthogonality: Vec<OrthogonalityEntry>,
    /// The same scores for the heads before training.
    pub orthogonality_initial: Vec<OrthogonalityEntry>,
    /// Student class tokens.
    pub knn: KnnSummary,
    /// Class tokens after the variant's head: `g_class(S)` or `h(T)`.
    pub head_knn: KnnSummary,
    /// KNN+ on student class tokens.
    pub ood: OodSummary,
    pub teacher: Probe,
    pub jl: JlSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim_red: Option<DimRedSummary>,
    pub final_losses: Option<LossComponents>,
    pub gram_density: Vec<DensityEntry>,
    /// History file name, relative to the report.
    pub history: String,
}

impl EvalReport {
    /// Small-side orthogonality entry of the first head.
    pub fn primary_gram_score(&self) -> Option<f64> {
        self.orthogonality
            .iter()
            .find(|e| e.side == small_side(e.rows, e.cols))
            .map(|e| e.score)
    }
}

/// `WᵀW` when `W` is tall, else `WWᵀ`: the side whose Gram can be full rank.
pub fn small_side(rows: usize, cols: usize) -> GramSide {
    if rows >= cols {
        GramSide::Wtw
    } else {
        GramSide::Wwt
    }
}

/// One trained variant with its report.
pub struct VariantRun {
    pub variant: Variant,
    pub output: TrainOutput,
    pub report: EvalReport,
}

/// `[n, t, d]` to the `[n, d]` class-token rows of the given samples.
pub fn class_rows(stack: &Tensor, idx: &[usize]) -> Tensor {
    let (t, d) = (stack.shape()[1], stack.shape()[2]);
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&stack.data()[i * t * d..i * t * d + d]);
    }
    Tensor::new(vec![idx.len(), d], data).expect("sizes match")
}

fn pick(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

fn probe(
    cfg: &ExperimentConfig,
    cls: &Tensor,
    labels: &[usize],
    split: &Split,
) -> Result<Probe, CliError> {
    let e = &cfg.eval;
    let (train, test, ood) = (
        gather_rows(cls, &split.train),
        gather_rows(cls, &split.test),
        gather_rows(cls, &split.ood),
    );
    let acc = knn_accuracy(&train, &pick(labels, &split.train), &test, &pick(labels, &split.test), e.knn_k)
        .map_err(|err| CliError::runtime("kNN evaluation", err))?;
    let o = ood_evaluate(
        &train,
        &test,
        &ood,
        e.ood_k,
        e.ood_fraction,
        cfg.seed.wrapping_add(seed_offset::OOD),
        e.normalize,
    )
    .map_err(|err| CliError::runtime("OOD evaluation", err))?;
    Ok(Probe {
        knn: KnnSummary {
            k: e.knn_k,
            accuracy: acc,
        },
        ood: OodSummary {
            k: o.k,
            fraction: o.fraction,
            auroc: o.auroc,
            fpr95: o.fpr95,
        },
    })
}

fn gather_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let d = m.row_len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("sizes match")
}

fn knn_only(cfg: &ExperimentConfig, cls: &Tensor, labels: &[usize], split: &Split) -> Result<KnnSummary, CliError> {
    let train = gather_rows(cls, &split.train);
    let test = gather_rows(cls, &split.test);
    let acc = knn_accuracy(&train, &pick(labels, &split.train), &test, &pick(labels, &split.test), cfg.eval.knn_k)
        .map_err(|e| CliError::runtime("head kNN evaluation", e))?;
    Ok(KnnSummary {
        k: cfg.eval.knn_k,
        accuracy: acc,
    })
}

/// Both Gram sides of every head.
pub fn orthogonality_entries(models: &TrainedModels) -> Result<Vec<OrthogonalityEntry>, CliError> {
    let mut out = Vec::new();
    for (name, h) in models.heads() {
        for side in [GramSide::Wtw, GramSide::Wwt] {
            let g = gram_orthogonality(&h.weight, side).map_err(|e| CliError::runtime("orthogonality", e))?;
            out.push(OrthogonalityEntry {
                head: name.into(),
                side,
                alpha: g.alpha,
                score: g.score,
                rows: g.rows,
                cols: g.cols,
            });
        }
    }
    Ok(out)
}

fn head_rows(head: &HeadParams, x: &Tensor) -> Result<Tensor, CliError> {
    head.forward_rows(x).map_err(|e| CliError::runtime("applying a head", e))
}

/// Evaluation shared by every variant: teacher and JL baselines.
pub struct Baselines {
    pub teacher: Probe,
    pub jl: JlSummary,
}

pub fn baselines(cfg: &ExperimentConfig, ed: &ExperimentData, split: &Split) -> Result<Baselines, CliError> {
    let all: Vec<usize> = (0..ed.data.len()).collect();
    let teacher_cls = class_rows(ed.data.teacher(), &all);
    let teacher = probe(cfg, &teacher_cls, &ed.labels, split)?;
    let (d, m) = (ed.data.d_teacher(), cfg.distill.d_student);
    let jl_seed = cfg.seed.wrapping_add(seed_offset::JL);
    let map = jl_construct(d, m, jl_seed).map_err(|e| CliError::runtime("JL projection", e))?;
    let projected = map.apply_rows(&teacher_cls).map_err(|e| CliError::runtime("JL projection", e))?;
    let p = probe(cfg, &projected, &ed.labels, split)?;
    let norm = jl_norm_preservation_check(d, m, cfg.eval.jl_trials, jl_seed.wrapping_add(1), &cfg.eval.jl_eps)
        .map_err(|e| CliError::runtime("JL norm check", e))?;
    let angle =
        jl_angle_check(d, m, cfg.eval.jl_trials, jl_seed.wrapping_add(2)).map_err(|e| CliError::runtime("JL angle check", e))?;
    Ok(Baselines {
        teacher,
        jl: JlSummary {
            d,
            m,
            knn: p.knn,
            ood: p.ood,
            norm,
            angle,
        },
    })
}

/// Trains one variant on the train split and evaluates it.
pub fn run_variant(
    cfg: &ExperimentConfig,
    ed: &ExperimentData,
    split: &Split,
    base: &Baselines,
    variant: Variant,
) -> Result<VariantRun, CliError> {
    let dcfg = cfg.distill_config(variant);
    let train_data = ed.data.select(&split.train);
    let output = train_on(&train_data, &dcfg).map_err(|e| CliError::runtime(format!("training {}", variant.name()), e))?;
    let models = &output.models;

    let student_out = models
        .student()
        .forward_stack(ed.data.inputs())
        .map_err(|e| CliError::runtime("running the student", e))?;
    let all: Vec<usize> = (0..ed.data.len()).collect();
    let student_cls = class_rows(&student_out, &all);
    let student = probe(cfg, &student_cls, &ed.labels, split)?;

    let head_knn = match models {
        TrainedModels::Proteus { head_class, .. } => {
            knn_only(cfg, &head_rows(head_class, &student_cls)?, &ed.labels, split)?
        }
        TrainedModels::Tintem { head, .. } => {
            let teacher_cls = class_rows(ed.data.teacher(), &all);
            knn_only(cfg, &head_rows(head, &teacher_cls)?, &ed.labels, split)?
        }
    };

    let orthogonality = orthogonality_entries(models)?;
    let orthogonality_initial = orthogonality_entries(&output.initial)?;
    let mut gram_density = Vec::new();
    for (name, h) in models.heads() {
        let (r, c) = (h.weight.shape()[0], h.weight.shape()[1]);
        let dens = gram_density_data(&h.weight, small_side(r, c)).map_err(|e| CliError::runtime("Gram density", e))?;
        gram_density.push(DensityEntry {
            head: name.into(),
            side: dens.side,
            diagonal: dens.diagonal,
            off_diagonal: dens.off_diagonal,
        });
    }

    let dim_red = match (&output.initial, models) {
        (TrainedModels::Tintem { head: h0, .. }, TrainedModels::Tintem { head: h1, .. }) => {
            let t = train_data.teacher();
            let ev = |h| evaluate_dim_red(t, h, &dcfg).map_err(|e| CliError::runtime("dim-red evaluation", e));
            Some(DimRedSummary {
                initial: ev(h0)?,
                final_: ev(h1)?,
            })
        }
        _ => None,
    };

    let report = EvalReport {
        variant: variant.name(),
        seed: cfg.seed,
        epochs: dcfg.epochs,
        d_teacher: ed.data.d_teacher(),
        d_student: dcfg.d_student,
        n_train: split.train.len(),
        n_test: split.test.len(),
        n_ood: split.ood.len(),
        ood_class: split.ood_class,
        orthogonality,
        orthogonality_initial,
        knn: student.knn,
        head_knn,
        ood: student.ood,
        teacher: base.teacher.clone(),
        jl: base.jl.clone(),
        dim_red,
        final_losses: output.history.records.last().map(|r| r.losses.clone()),
        gram_density,
        history: HISTORY_FILE.into(),
    };
    Ok(VariantRun {
        variant,
        output,
        report,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

/// Runs every configured variant in memory.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<VariantRun>, CliError> {
    let ed = load_data(cfg)?;
    let ood_class = cfg.eval.ood_class.unwrap_or(ed.n_classes.saturating_sub(1));
    let split = split_samples(
        &ed.labels,
        ood_class,
        cfg.eval.test_fraction,
        cfg.seed.wrapping_add(seed_offset::SPLIT),
    )?;
    log::info!(
        "{} train, {} test, {} OOD samples (class {ood_class})",
        split.train.len(),
        split.test.len(),
        split.ood.len()
    );
    let base = baselines(cfg, &ed, &split)?;
    cfg.distill
        .variants
        .iter()
        .map(|&v| {
            log::info!("training {}", v.name());
            run_variant(cfg, &ed, &split, &base, v)
        })
        .collect()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("writing {}", path.display()), e))
}

/// Writes `<out>/<variant>/{report.json, history.jsonl, timings.jsonl, *.ckpt}`
/// and returns the report paths.
pub fn write_run(run: &VariantRun, out_dir: &Path) -> Result<PathBuf, CliError> {
    let dir = out_dir.join(run.variant.name());
    fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("creating {}", dir.display()), e))?;
    let mut json = serde_json::to_string_pretty(&run.report).map_err(|e| CliError::runtime("serializing the report", e))?;
    json.push('\n');
    let report_path = dir.join(REPORT_FILE);
    write(&report_path, json)?;
    write(&dir.join(HISTORY_FILE), run.output.history.to_jsonl())?;
    write(&dir.join(TIMINGS_FILE), run.output.history.timings_jsonl())?;
    write(&dir.join("student.ckpt"), run.output.models.student().to_checkpoint().to_bytes())?;
    for (name, h) in run.output.models.heads() {
        write(&dir.join(format!("{name}.ckpt")), h.to_checkpoint(name).to_bytes())?;
    }
    Ok(report_path)
}

/// Full `run` subcommand: trains, evaluates and writes every variant.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    run_all(cfg)?.iter().map(|r| write_run(r, out_dir)).collect()
}

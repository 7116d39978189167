//! Acceptance suite. Each test prints one `[PASS]` or `[FAIL]` line with the
//! measured quantities, then asserts. Run with `--nocapture` to see them.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use orthodistill::cli::{run_all, EvalReport, ExperimentConfig};
use orthodistill::distill::{evaluate_dim_red, DistillConfig, StudentMetric, TrainData, TrainedModels, Variant};
use orthodistill::heads::{head_forward_var, init_head, HeadParams, HeadVars, NormMode};
use orthodistill::metrics::{
    auroc, fpr_at_95, gram_orthogonality, jl_angle_check, jl_norm_preservation_check, knn_plus_scores, GramSide,
};
use orthodistill::numkernel::{finite_diff_check, KernelError, Tape, Tensor, Var};
use orthodistill::simgeom::{
    cosine_set_loss_var, dim_red_loss_var, kl_multi_temp_var, l2_set_loss_var, similarity_matrix, TemperatureSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn verdict(id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!("[{}] {id:>2} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn shipped_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tintem_vs_proteus.toml")
}

fn shipped_config() -> ExperimentConfig {
    ExperimentConfig::load(&shipped_config_path()).expect("shipped config parses")
}

// ---------------------------------------------------------------------------
// 1. gradients

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn head_vars_with(tape: &mut Tape, h: &HeadParams, which: usize, leaf: Var) -> HeadVars {
    let mut hv = h.register(tape, false);
    match which {
        0 => hv.gamma = leaf,
        1 => hv.beta1 = leaf,
        2 => hv.weight = leaf,
        _ => hv.beta2 = leaf,
    }
    hv
}

fn head_tensor(h: &HeadParams, which: usize) -> Tensor {
    [&h.gamma, &h.beta1, &h.weight, &h.beta2][which].clone()
}

fn random_head(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, mode: NormMode) -> HeadParams {
    let mut h = init_head(d_in, d_out, mode, rng.random()).unwrap();
    // move gamma and the biases off their initial values
    h.gamma = h.gamma.map(|g| g + 0.3 * (g * 7.1).sin());
    h.beta1 = normal(rng, &[d_in]).map(|x| 0.2 * x);
    h.beta2 = normal(rng, &[d_out]).map(|x| 0.2 * x);
    h
}

/// Worst relative error over the instances of one family.
fn worst_over<F: FnMut(usize, &mut ChaCha8Rng) -> f64>(seed: u64, mut f: F) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INSTANCES).map(|i| f(i, &mut rng)).fold(0.0, f64::max)
}

fn objective_fd_error(models: &TrainedModels, batch: &TrainData, cfg: &DistillConfig, only: Option<(usize, usize)>) -> f64 {
    let (_, grads) = models.objective_grad(batch, cfg).unwrap();
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let (lo, hi) = only.unwrap_or((0, flat.len()));
    let mut worst: f64 = 0.0;
    for i in lo..hi {
        let fp = models.perturbed(i, FD_STEP).objective(batch, cfg).unwrap();
        let fm = models.perturbed(i, -FD_STEP).objective(batch, cfg).unwrap();
        let fd = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max((flat[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, t: usize, d_in: usize, d_t: usize) -> TrainData {
    TrainData::new(normal(rng, &[n, t, d_in]), normal(rng, &[n, t, d_t])).unwrap()
}

fn small_cfg(variant: Variant, rng: &mut ChaCha8Rng, metric: StudentMetric) -> DistillConfig {
    DistillConfig {
        variant,
        student_metric: metric,
        temperatures: TemperatureSet::new(vec![0.05, 0.1, 0.5]).unwrap(),
        d_student: 3,
        student_hidden: 5,
        batch_size: 64,
        head_seed: rng.random(),
        student_seed: rng.random(),
        ..DistillConfig::default()
    }
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let temps = TemperatureSet::default_set();
    let mut families: Vec<(&str, f64)> = Vec::new();

    families.push((
        "kl_loss_multi_temp",
        worst_over(11, |i, rng| {
            let n = 3 + i % 4;
            let p = normal(rng, &[1, n, 4]);
            let q = normal(rng, &[1, n, 3]);
            let wrt_q = i % 2 == 0;
            let fixed = if wrt_q { p.clone() } else { q.clone() };
            let x = if wrt_q { q } else { p };
            finite_diff_check(
                |t: &mut Tape, v| -> Result<Var, KernelError> {
                    let c = t.constant(fixed.clone());
                    if wrt_q {
                        kl_multi_temp_var(t, c, v, &temps)
                    } else {
                        kl_multi_temp_var(t, v, c, &temps)
                    }
                },
                &x,
                FD_STEP,
            )
            .unwrap()
        }),
    ));

    families.push((
        "dim_red_loss",
        worst_over(12, |i, rng| {
            let mode = if i % 5 == 4 { NormMode::None } else { NormMode::LayerNorm };
            let h = random_head(rng, 6, 3, mode);
            let teacher = normal(rng, &[4, 3, 6]);
            let which = i % 4;
            finite_diff_check(
                |t: &mut Tape, v| -> Result<Var, KernelError> {
                    let hv = head_vars_with(t, &h, which, v);
                    let tv = t.constant(teacher.clone());
                    dim_red_loss_var(t, tv, &hv, &temps, true)
                },
                &head_tensor(&h, which),
                FD_STEP,
            )
            .unwrap()
        }),
    ));

    for (name, cosine) in [("cosine_set_loss", true), ("l2_set_loss", false)] {
        families.push((
            name,
            worst_over(13, |i, rng| {
                let n = 2 + i % 5;
                let z = normal(rng, &[n, 4]);
                let y = normal(rng, &[n, 4]);
                finite_diff_check(
                    |t: &mut Tape, v| -> Result<Var, KernelError> {
                        let yc = t.constant(y.clone());
                        if cosine {
                            cosine_set_loss_var(t, v, yc)
                        } else {
                            l2_set_loss_var(t, v, yc)
                        }
                    },
                    &z,
                    FD_STEP,
                )
                .unwrap()
            }),
        ));
    }

    families.push((
        "head_forward composed",
        worst_over(14, |i, rng| {
            let mode = if i % 2 == 0 { NormMode::LayerNorm } else { NormMode::None };
            let h = random_head(rng, 5, 4, mode);
            let z = normal(rng, &[6, 5]);
            let y = normal(rng, &[6, 4]);
            let which = i % 4;
            finite_diff_check(
                |t: &mut Tape, v| -> Result<Var, KernelError> {
                    let hv = head_vars_with(t, &h, which, v);
                    let zc = t.constant(z.clone());
                    let out = head_forward_var(t, &hv, zc)?;
                    let yc = t.constant(y.clone());
                    let a = cosine_set_loss_var(t, out, yc)?;
                    let b = l2_set_loss_var(t, out, yc)?;
                    t.add(a, b)
                },
                &head_tensor(&h, which),
                FD_STEP,
            )
            .unwrap()
        }),
    ));

    families.push((
        "TinTeM objective (gamma-weighted)",
        worst_over(15, |i, rng| {
            let gamma = 0.5 + 10.0 * rng.random::<f64>();
            let metric = if i % 2 == 0 { StudentMetric::Cosine } else { StudentMetric::Mse };
            let cfg = small_cfg(Variant::TintemWeighted { gamma }, rng, metric);
            let batch = random_batch(rng, 4, 3, 4, 6);
            let models = TrainedModels::init(&cfg, 4, 6).unwrap();
            objective_fd_error(&models, &batch, &cfg, None)
        }),
    ));

    // With the frozen target the head moves along the similarity loss alone
    // and the student along the full objective.
    families.push((
        "TinTeM objective (frozen)",
        worst_over(16, |i, rng| {
            let metric = if i % 2 == 0 { StudentMetric::Cosine } else { StudentMetric::Mse };
            let cfg = small_cfg(Variant::TintemFrozen, rng, metric);
            let batch = random_batch(rng, 4, 3, 4, 6);
            let models = TrainedModels::init(&cfg, 4, 6).unwrap();
            let n_head: usize = models.flat_params()[..4].iter().map(|t| t.numel()).sum();
            let n_all: usize = models.flat_params().iter().map(|t| t.numel()).sum();
            let student_err = objective_fd_error(&models, &batch, &cfg, Some((n_head, n_all)));
            let (_, grads) = models.objective_grad(&batch, &cfg).unwrap();
            let head_grad: Vec<f64> = grads[..4].iter().flat_map(|g| g.data().to_vec()).collect();
            let TrainedModels::Tintem { head, .. } = &models else { unreachable!() };
            let mut head_err: f64 = 0.0;
            for (k, g) in head_grad.iter().enumerate() {
                let eval = |d: f64| {
                    let TrainedModels::Tintem { head: h, .. } = models.perturbed(k, d) else { unreachable!() };
                    evaluate_dim_red(batch.teacher(), &h, &cfg).unwrap()
                };
                let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                head_err = head_err.max((g - fd).abs() / fd.abs().max(1.0));
            }
            let _ = head;
            student_err.max(head_err)
        }),
    ));

    families.push((
        "Proteus objective",
        worst_over(17, |i, rng| {
            let mut cfg = small_cfg(Variant::Proteus, rng, StudentMetric::Cosine);
            cfg.feature_term = i % 4 != 3;
            let batch = random_batch(rng, 4, 3, 4, 6);
            let models = TrainedModels::init(&cfg, 4, 6).unwrap();
            objective_fd_error(&models, &batch, &cfg, None)
        }),
    ));

    let elapsed = start.elapsed().as_secs_f64();
    let worst = families.iter().map(|f| f.1).fold(0.0, f64::max);
    let pass = worst < FD_TOL && elapsed < 60.0;
    let detail: Vec<String> = families.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    verdict(
        1,
        "gradient correctness",
        pass,
        format!("max rel err {worst:.2e} (< {FD_TOL:.0e}) in {elapsed:.1}s (< 60s); {}", detail.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. similarity normalization

#[test]
fn c02_similarity_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut exact = true;
    for n in [2, 3, 8, 64] {
        for tau in [0.01, 0.1, 1.0] {
            let pts = normal(&mut rng, &[n, 5]);
            let m = similarity_matrix(&pts, tau).unwrap();
            let mut total = 0.0;
            for i in 0..n {
                exact &= m.get(i, i) == 0.0;
                for j in 0..n {
                    exact &= m.get(i, j) == m.get(j, i);
                    total += m.get(i, j);
                }
            }
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let pass = exact && worst_sum <= 1e-10;
    verdict(
        2,
        "similarity normalization",
        pass,
        format!("symmetry and zero diagonal exact: {exact}; max |sum - 1| = {worst_sum:.1e} (<= 1e-10)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. orthogonality oracle

fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut cs: Vec<Vec<f64>> = Vec::new();
    while cs.len() < cols {
        let mut v: Vec<f64> = normal(rng, &[rows]).into_data();
        for _ in 0..2 {
            for c in &cs {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cs.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut data = vec![0.0; rows * cols];
    for (j, c) in cs.iter().enumerate() {
        for i in 0..rows {
            data[i * cols + j] = c[i];
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn c03_orthogonality_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pass = true;
    let mut detail = Vec::new();
    for (dt, ds) in [(8usize, 4usize), (64, 16), (768, 384)] {
        let w = orthonormal_columns(&mut rng, dt, ds).map(|x| 2.5 * x);
        let small = gram_orthogonality(&w, GramSide::Wtw).unwrap().score;
        let big = gram_orthogonality(&w, GramSide::Wwt).unwrap().score;
        let want = (((dt - ds) * dt) as f64 / ds as f64).sqrt();
        let ok = small < 1e-10 && (big - want).abs() <= 1e-8;
        pass &= ok;
        detail.push(format!("({dt},{ds}) WtW {small:.1e}, WWt {big:.10} vs {want:.10}"));
    }
    verdict(3, "orthogonality oracle", pass, detail.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4.-7. trained runs on the shipped config

struct SeedRuns {
    seed: u64,
    tintem: EvalReport,
    proteus: EvalReport,
    tintem_seconds: f64,
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn seed_runs() -> &'static Vec<SeedRuns> {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = shipped_config();
                cfg.seed = seed;
                cfg.distill.variants = vec![Variant::TintemFrozen];
                let start = Instant::now();
                let tintem = run_all(&cfg).unwrap().remove(0).report;
                let tintem_seconds = start.elapsed().as_secs_f64();
                cfg.distill.variants = vec![Variant::Proteus];
                let proteus = run_all(&cfg).unwrap().remove(0).report;
                SeedRuns {
                    seed,
                    tintem,
                    proteus,
                    tintem_seconds,
                }
            })
            .collect()
    })
}

fn wtw(entries: &[orthodistill::cli::experiment::OrthogonalityEntry]) -> f64 {
    entries.iter().find(|e| e.side == GramSide::Wtw).unwrap().score
}

#[test]
fn c04_dim_red_trains_toward_orthogonality() {
    let cfg = shipped_config();
    assert_eq!(cfg.seed, 1);
    let base = &seed_runs()[0];
    assert_eq!(base.seed, cfg.seed);
    let r = &base.tintem;
    assert_eq!((r.d_teacher, r.d_student, r.epochs), (64, 16, 30));
    let (g0, g1) = (wtw(&r.orthogonality_initial), wtw(&r.orthogonality));
    let dr = r.dim_red.as_ref().unwrap();
    let pass = g1 < 0.5 * g0 && dr.final_ < 0.3 * dr.initial && base.tintem_seconds < 300.0;
    verdict(
        4,
        "dim-red trains toward orthogonality",
        pass,
        format!(
            "WtW score {g0:.4} -> {g1:.4} ({:.1}%, < 50%); dim-red {:.4} -> {:.4} ({:.1}%, < 30%); {:.1}s (< 300s)",
            100.0 * g1 / g0,
            dr.initial,
            dr.final_,
            100.0 * dr.final_ / dr.initial,
            base.tintem_seconds
        ),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn c05_faithfulness_ordering() {
    let runs = seed_runs();
    let t: Vec<f64> = runs.iter().map(|r| r.tintem.ood.auroc).collect();
    let p: Vec<f64> = runs.iter().map(|r| r.proteus.ood.auroc).collect();
    assert!(runs.iter().all(|r| r.tintem.ood.k == 1 && r.tintem.ood.fraction == 1.0));
    let (mt, mp) = (median(t.clone()), median(p.clone()));
    let pass = mt > mp;
    verdict(
        5,
        "faithfulness ordering",
        pass,
        format!("median AUROC TinTeM {mt:.4} vs Proteus {mp:.4}; per seed TinTeM {t:.3?}, Proteus {p:.3?}"),
    );
    assert!(pass);
}

#[test]
fn c06_head_contamination() {
    let runs = seed_runs();
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (r.proteus.head_knn.accuracy, r.proteus.knn.accuracy))
        .collect();
    let wins = pairs.iter().filter(|(h, b)| h >= b).count();
    let pass = wins >= 4;
    let detail: Vec<String> = pairs.iter().map(|(h, b)| format!("{h:.3}/{b:.3}")).collect();
    verdict(
        6,
        "head contamination",
        pass,
        format!("head >= backbone kNN in {wins}/5 seeds (>= 4); head/backbone {}", detail.join(" ")),
    );
    assert!(pass);
}

#[test]
fn c07_ablation_parity() {
    let frozen = &seed_runs()[0].tintem;
    let mut cfg = shipped_config();
    cfg.distill.variants = vec![Variant::TintemWeighted { gamma: 10.0 }];
    let weighted = run_all(&cfg).unwrap().remove(0);
    cfg.distill.variants = vec![Variant::TintemFrozen];
    cfg.distill.student_metric = StudentMetric::Mse;
    let mse = run_all(&cfg).unwrap().remove(0);

    let converged = |h: &orthodistill::distill::TrainHistory| {
        let s: Vec<f64> = h.records.iter().map(|r| r.losses.student.unwrap()).collect();
        let peak = s.iter().cloned().fold(f64::MIN, f64::max);
        s.iter().all(|v| v.is_finite()) && *s.last().unwrap() < peak
    };
    let gap_w = (frozen.knn.accuracy - weighted.report.knn.accuracy).abs();
    let gap_m = (frozen.knn.accuracy - mse.report.knn.accuracy).abs();
    let conv = converged(&weighted.output.history) && converged(&mse.output.history);
    let pass = gap_w <= 0.02 && gap_m <= 0.03 && conv;
    verdict(
        7,
        "ablation parity",
        pass,
        format!(
            "kNN frozen {:.4} vs gamma=10 {:.4} (gap {:.2} pts, <= 2); cosine {:.4} vs MSE {:.4} (gap {:.2} pts, <= 3); student losses finite and past their peak: {conv}",
            frozen.knn.accuracy,
            weighted.report.knn.accuracy,
            100.0 * gap_w,
            frozen.knn.accuracy,
            mse.report.knn.accuracy,
            100.0 * gap_m
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. JL diagnostics

#[test]
fn c08_jl_diagnostics() {
    let d = 128;
    let eps = [0.1, 0.2, 0.3];
    let checks: Vec<_> = [16, 64, 256]
        .iter()
        .map(|&m| jl_norm_preservation_check(d, m, 2000, 80 + m as u64, &eps).unwrap())
        .collect();
    let mean256 = checks[2].mean_sq_norm;
    let mut monotone = true;
    for e in 0..eps.len() {
        for w in checks.windows(2) {
            monotone &= w[1].success[e].1 >= w[0].success[e].1;
        }
    }
    let a16 = jl_angle_check(d, 16, 2000, 8).unwrap().median;
    let a256 = jl_angle_check(d, 256, 2000, 9).unwrap().median;
    let pass = (0.97..=1.03).contains(&mean256) && monotone && a256 < a16;
    let succ: Vec<String> = checks
        .iter()
        .map(|c| format!("m={} {:?}", c.m, c.success.iter().map(|s| (s.1 * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
        .collect();
    verdict(
        8,
        "JL diagnostics",
        pass,
        format!(
            "mean |f(x)|^2 at m=256: {mean256:.4} (in [0.97, 1.03]); eps-success non-decreasing: {monotone} ({}); angle median {a16:.4} -> {a256:.4}",
            succ.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. metric oracles

#[test]
fn c09_metric_oracles() {
    let a = auroc(&[1.0, 2.0, 3.0], &[2.5, 3.5]).unwrap();
    let id = vec![0.0; 100];
    let mut ood = vec![0.0; 100];
    ood[..10].iter_mut().for_each(|v| *v = 1.0);
    let f = fpr_at_95(&id, &ood).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for trial in 0..3 {
        let reference = normal(&mut rng, &[200, 7]);
        let eval = normal(&mut rng, &[200, 7]);
        let scores = knn_plus_scores(&reference, 1.0, 1, &eval, trial, true).unwrap();
        let unit = |r: &[f64]| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        for (q, s) in eval.rows().zip(&scores) {
            let qu = unit(q);
            let best = reference
                .rows()
                .map(|r| unit(r).iter().zip(&qu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max((best - s).abs());
        }
    }
    let pass = a == 5.0 / 6.0 && f == 0.9 && worst <= 1e-12;
    verdict(
        9,
        "metric oracles",
        pass,
        format!("auroc {a} (== 5/6: {}); fpr@95 {f} (== 0.90); KNN+ vs brute force max diff {worst:.1e} (<= 1e-12)", a == 5.0 / 6.0),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 10. end-to-end determinism

#[test]
fn c10_end_to_end_determinism() {
    let bin = env!("CARGO_BIN_EXE_orthodistill");
    let tmp = tempfile::tempdir().unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for out in &outs {
        let status = Command::new(bin)
            .arg("run")
            .arg(shipped_config_path())
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let cfg = shipped_config();
    let mut compared = 0;
    let mut identical = true;
    for v in &cfg.distill.variants {
        for file in ["report.json", "history.jsonl"] {
            let a = std::fs::read(outs[0].join(v.name()).join(file)).unwrap();
            let b = std::fs::read(outs[1].join(v.name()).join(file)).unwrap();
            identical &= !a.is_empty() && a == b;
            compared += 1;
        }
    }
    verdict(
        10,
        "end-to-end determinism",
        identical,
        format!("{compared} report/history files byte-identical across two runs: {identical}"),
    );
    assert!(identical);
}

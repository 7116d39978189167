//! Command-line experiment runner: config files, seeded end-to-end runs,
//! report comparison and plot-data emission.
//!
//! Exit codes: 0 on success, 2 when a config fails to parse or validate, 1
//! for any other failure.

pub mod config;
pub mod experiment;
pub mod plot;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{run_all, run_experiment, EvalReport, VariantRun};
pub use plot::{emit_plot_data, PlotData, PlotKind};

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::synthdata::{save_embeddings, TokenSet};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(context: impl Display, err: impl Display) -> Self {
        CliError::Runtime(format!("{context}: {err}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "orthodistill", version, about = "Orthogonality-preserving distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate data, train every configured variant and write reports.
    Run {
        config: PathBuf,
        /// Replaces the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: the config's output_dir].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate reports; the delta column is relative to the first report.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Emit CSV and SVG plot data from reports, histories or head checkpoints.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Directory for <kind>.csv and <kind>.svg.
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Write the configured inputs, teacher outputs and teacher checkpoint.
    GenData {
        config: PathBuf,
        /// Output directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.resolve(&cfg.output_dir));
            for p in run_experiment(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Compare { reports } => print!("{}", compare(&reports)?),
        Command::Plot { kind, out, files } => {
            for p in plot::write_plot(kind, &files, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            let names: Vec<String> = cfg.distill.variants.iter().map(|v| v.name()).collect();
            println!("{}: ok ({})", config.display(), names.join(", "));
        }
        Command::GenData { config, out } => {
            let cfg = load(&config, None)?;
            let out = out.unwrap_or_else(|| cfg.resolve(&cfg.output_dir).join("data"));
            for p in gen_data(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Fixed-width table with one row per report and an AUROC delta against
/// the first row.
pub fn compare(paths: &[PathBuf]) -> Result<String, CliError> {
    let reports = paths.iter().map(|p| plot::read_report(p)).collect::<Result<Vec<_>, _>>()?;
    let base = reports.first().map_or(0.0, |r| r.ood.auroc);
    let width = reports.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>10}",
        "variant", "knn_acc", "head_knn", "auroc", "d_auroc", "fpr95", "gram_score"
    );
    for r in &reports {
        let gram = r.primary_gram_score().map_or("-".to_string(), |g| format!("{g:.4}"));
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>+8.4}  {:>8.4}  {:>10}",
            r.variant,
            r.knn.accuracy,
            r.head_knn.accuracy,
            r.ood.auroc,
            r.ood.auroc - base,
            r.ood.fpr95,
            gram
        );
    }
    Ok(s)
}

/// Writes `inputs.bin`, `teacher_outputs.bin` and, for a synthetic teacher,
/// `teacher.ckpt`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let ed = experiment::load_data(cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("creating {}", out.display()), e))?;
    let inputs = out.join("inputs.bin");
    save_embeddings(&inputs, &ed.input_sets).map_err(|e| CliError::runtime(format!("writing {}", inputs.display()), e))?;
    let t = ed.data.teacher();
    let (tok, d) = (t.shape()[1], t.shape()[2]);
    let sets = (0..ed.data.len())
        .map(|i| {
            let flat = &t.data()[i * tok * d..(i + 1) * tok * d];
            Ok((TokenSet::from_flat(flat, d)?, ed.labels[i]))
        })
        .collect::<Result<Vec<_>, crate::synthdata::DataError>>()
        .map_err(|e| CliError::runtime("splitting teacher outputs", e))?;
    let teacher_path = out.join("teacher_outputs.bin");
    save_embeddings(&teacher_path, &sets).map_err(|e| CliError::runtime(format!("writing {}", teacher_path.display()), e))?;
    let mut written = vec![inputs, teacher_path];
    if let Some(teacher) = &ed.teacher {
        let ck = out.join("teacher.ckpt");
        teacher
            .to_checkpoint()
            .write(&ck)
            .map_err(|e| CliError::runtime(format!("writing {}", ck.display()), e))?;
        written.push(ck);
    }
    Ok(written)
}

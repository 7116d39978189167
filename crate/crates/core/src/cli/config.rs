//! Experiment configuration files.
//!
//! A config is a TOML document. Every table rejects unknown keys. Relative
//! paths are resolved against the directory holding the config file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, OptimizerConfig, StudentMetric, Variant};
use crate::heads::NormMode;
use crate::simgeom::TemperatureSet;
use crate::synthdata::{DatasetSpec, TeacherSpec};

/// Offsets added to the global seed for each random consumer.
pub mod seed_offset {
    pub const DATA: u64 = 0;
    pub const TEACHER: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const HEAD: u64 = 3;
    pub const STUDENT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const OOD: u64 = 6;
    pub const JL: u64 = 7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSection>,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n_samples: usize,
    pub n_classes: usize,
    pub d_in: usize,
    pub n_patch: usize,
    pub class_separation: f64,
}

/// Pre-computed embeddings in the binary embedding format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub inputs: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_outputs: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub hidden: usize,
    pub d_out: usize,
    #[serde(default)]
    pub class_offset_scale: f64,
}

/// Training settings shared by every listed variant. Seeds are derived from
/// the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub variants: Vec<Variant>,
    pub student_metric: StudentMetric,
    pub temperatures: TemperatureSet,
    pub head_lr: f64,
    pub student_lr: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub feature_term: bool,
    pub d_student: usize,
    pub student_hidden: usize,
    pub head_norm: NormMode,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            variants: vec![Variant::TintemFrozen, Variant::Proteus],
            student_metric: d.student_metric,
            temperatures: d.temperatures,
            head_lr: d.head_lr,
            student_lr: d.student_lr,
            optimizer: d.optimizer,
            batch_size: d.batch_size,
            epochs: d.epochs,
            feature_term: d.feature_term,
            d_student: d.d_student,
            student_hidden: d.student_hidden,
            head_norm: d.head_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub knn_k: usize,
    /// Class held out of training and used as the OOD set; defaults to the
    /// last class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_class: Option<usize>,
    pub ood_k: usize,
    pub ood_fraction: f64,
    pub normalize: bool,
    /// Share of in-distribution samples kept out of training for evaluation.
    pub test_fraction: f64,
    pub jl_trials: usize,
    pub jl_eps: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            knn_k: crate::metrics::DEFAULT_KNN_K,
            ood_class: None,
            ood_k: 1,
            ood_fraction: 1.0,
            normalize: true,
            test_fraction: 0.2,
            jl_trials: 500,
            jl_eps: vec![0.1, 0.2, 0.3],
        }
    }
}

/// A config problem tied to a line of the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.path, self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line holding byte `offset`.
fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Finds the line declaring `key` inside `[section]`, falling back to the
/// section header, then to line 1.
fn line_of(text: &str, section: &str, key: Option<&str>) -> usize {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some(k) = key {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == k {
                    return i + 1;
                }
            }
        }
    }
    header_line.unwrap_or(1)
}

impl ExperimentConfig {
    /// Reads, parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.display().to_string(),
            line: 0,
            message: format!("cannot read config: {e}"),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_with_base(&text, &path.display().to_string(), base)
    }

    /// Parses and validates `text`; `origin` names the source in errors.
    pub fn parse_with_base(text: &str, origin: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: origin.to_string(),
            line: e.span().map_or(1, |s| line_at(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.base_dir = base_dir;
        cfg.validate().map_err(|(section, key, message)| ConfigError {
            path: origin.to_string(),
            line: line_of(text, section, key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_base(text, "<config>", PathBuf::new())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are representable in TOML")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.data.synthetic.as_ref().map(|s| s.n_classes)
    }

    pub fn dataset_spec(&self) -> Option<DatasetSpec> {
        self.data.synthetic.as_ref().map(|s| DatasetSpec {
            n_samples: s.n_samples,
            n_classes: s.n_classes,
            d_in: s.d_in,
            n_patch: s.n_patch,
            class_separation: s.class_separation,
            seed: self.seed.wrapping_add(seed_offset::DATA),
        })
    }

    pub fn teacher_spec(&self, d_in: usize) -> Option<TeacherSpec> {
        self.teacher.as_ref().map(|t| TeacherSpec {
            d_in,
            hidden: t.hidden,
            d_out: t.d_out,
            class_offset_scale: t.class_offset_scale,
            seed: self.seed.wrapping_add(seed_offset::TEACHER),
        })
    }

    /// Full training settings for one variant, seeds included.
    pub fn distill_config(&self, variant: Variant) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            variant,
            student_metric: d.student_metric,
            temperatures: d.temperatures.clone(),
            head_lr: d.head_lr,
            student_lr: d.student_lr,
            optimizer: d.optimizer,
            batch_size: d.batch_size,
            epochs: d.epochs,
            head_seed: self.seed.wrapping_add(seed_offset::HEAD),
            student_seed: self.seed.wrapping_add(seed_offset::STUDENT),
            shuffle_seed: self.seed.wrapping_add(seed_offset::SHUFFLE),
            feature_term: d.feature_term,
            d_student: d.d_student,
            student_hidden: d.student_hidden,
            head_norm: d.head_norm,
        }
    }

    /// Semantic checks. Errors carry `(section, key, message)` for line lookup.
    fn validate(&self) -> Result<(), (&'static str, Option<&'static str>, String)> {
        match (&self.data.synthetic, &self.data.file) {
            (Some(_), Some(_)) => {
                return Err((
                    "data.file",
                    None,
                    "exactly one data source is allowed, found both [data.synthetic] and [data.file]".into(),
                ))
            }
            (None, None) => {
                return Err(("data", None, "no data source: add [data.synthetic] or [data.file]".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.data.synthetic {
            let sec = "data.synthetic";
            if s.n_classes < 3 {
                return Err((sec, Some("n_classes"), format!("n_classes must be >= 3 so one can be held out, got {}", s.n_classes)));
            }
            if s.n_samples < 4 * s.n_classes {
                return Err((sec, Some("n_samples"), format!("n_samples must be >= 4 * n_classes, got {}", s.n_samples)));
            }
            if s.d_in < 2 {
                return Err((sec, Some("d_in"), format!("d_in must be >= 2, got {}", s.d_in)));
            }
            if !(s.class_separation >= 0.0 && s.class_separation.is_finite()) {
                return Err((sec, Some("class_separation"), format!("class_separation must be finite and >= 0, got {}", s.class_separation)));
            }
        }
        if let Some(f) = &self.data.file {
            for (key, p) in [("inputs", Some(&f.inputs)), ("teacher_outputs", f.teacher_outputs.as_ref())] {
                if let Some(p) = p {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(("data.file", Some(key), format!("file not found: {}", full.display())));
                    }
                }
            }
        }
        let file_teacher = self.data.file.as_ref().is_some_and(|f| f.teacher_outputs.is_some());
        match (&self.teacher, file_teacher) {
            (Some(_), true) => {
                return Err((
                    "teacher",
                    None,
                    "teacher outputs come from [data.file] teacher_outputs; remove [teacher]".into(),
                ))
            }
            (None, false) => return Err(("teacher", None, "missing [teacher] section".into())),
            _ => {}
        }
        if let Some(t) = &self.teacher {
            if t.hidden == 0 {
                return Err(("teacher", Some("hidden"), "hidden must be positive".into()));
            }
            if t.d_out < 2 {
                return Err(("teacher", Some("d_out"), format!("d_out must be >= 2, got {}", t.d_out)));
            }
            if !(t.class_offset_scale >= 0.0 && t.class_offset_scale.is_finite()) {
                return Err(("teacher", Some("class_offset_scale"), "class_offset_scale must be finite and >= 0".into()));
            }
        }
        if self.distill.variants.is_empty() {
            return Err(("distill", Some("variants"), "variants must list at least one variant".into()));
        }
        let mut names: Vec<String> = self.distill.variants.iter().map(Variant::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(("distill", Some("variants"), "variants must be distinct".into()));
        }
        for v in &self.distill.variants {
            if let Err(e) = self.distill_config(*v).validate() {
                return Err(("distill", None, e.to_string()));
            }
        }
        let e = &self.eval;
        if e.knn_k == 0 {
            return Err(("eval", Some("knn_k"), "knn_k must be >= 1".into()));
        }
        if e.ood_k == 0 {
            return Err(("eval", Some("ood_k"), "ood_k must be >= 1".into()));
        }
        if !(e.ood_fraction > 0.0 && e.ood_fraction <= 1.0) {
            return Err(("eval", Some("ood_fraction"), format!("ood_fraction must lie in (0, 1], got {}", e.ood_fraction)));
        }
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(("eval", Some("test_fraction"), format!("test_fraction must lie in (0, 1), got {}", e.test_fraction)));
        }
        if let (Some(c), Some(n)) = (e.ood_class, self.n_classes()) {
            if c >= n {
                return Err(("eval", Some("ood_class"), format!("ood_class {c} out of range for {n} classes")));
            }
        }
        if e.jl_trials == 0 {
            return Err(("eval", Some("jl_trials"), "jl_trials must be >= 1".into()));
        }
        if e.jl_eps.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(("eval", Some("jl_eps"), "jl_eps entries must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7

[data.synthetic]
n_samples = 80
n_classes = 4
d_in = 6
n_patch = 2
class_separation = 2.0

[teacher]
hidden = 12
d_out = 8
class_offset_scale = 1.0

[distill]
variants = ["tintem_frozen", { tintem_weighted = { gamma = 10.0 } }, "proteus"]
epochs = 2
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.distill.variants.len(), 3);
        assert_eq!(cfg.distill.variants[1], Variant::TintemWeighted { gamma: 10.0 });
        assert_eq!(cfg.eval, EvalSection::default());
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn seeds_are_derived_from_the_global_seed() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        let d = cfg.distill_config(Variant::Proteus);
        assert_eq!((d.head_seed, d.student_seed, d.shuffle_seed), (10, 11, 12));
        assert_eq!(cfg.dataset_spec().unwrap().seed, 7);
        assert_eq!(cfg.teacher_spec(6).unwrap().seed, 8);
    }

    #[test]
    fn unknown_key_points_at_its_line() {
        let text = BASE.replace("epochs = 2", "epochs = 2\nlearning_rate = 0.1");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        let want = text.lines().position(|l| l.starts_with("learning_rate")).unwrap() + 1;
        assert_eq!(err.line, want, "{err}");
        assert!(err.message.contains("learning_rate"), "{err}");
    }

    #[test]
    fn two_data_sources_are_rejected_at_the_file_table() {
        let text = format!("{BASE}\n[data.file]\ninputs = \"x.bin\"\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        let want = text.lines().position(|l| l.trim() == "[data.file]").unwrap() + 1;
        assert_eq!(err.line, want);
        assert!(err.message.contains("exactly one"));
    }

    #[test]
    fn semantic_errors_name_the_key_line() {
        let text = BASE.replace("d_out = 8", "d_out = 1");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        let want = text.lines().position(|l| l.starts_with("d_out")).unwrap() + 1;
        assert_eq!(err.line, want);
        let text = format!("{BASE}\n[eval]\nood_class = 9\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert_eq!(err.line, text.lines().count());
    }

    #[test]
    fn missing_files_are_rejected() {
        let text = "seed = 1\n[data.file]\ninputs = \"/nonexistent/in.bin\"\nteacher_outputs = \"/nonexistent/t.bin\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("not found"));
    }
}

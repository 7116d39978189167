use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use super::DistillError;
use crate::heads::NormMode;
use crate::simgeom::TemperatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Similarity loss on the head, detached head target for the student.
    TintemFrozen,
    /// `gamma * dim_red + student`, both terms reaching the head.
    TintemWeighted { gamma: f64 },
    Proteus,
}

impl Variant {
    /// Stable name used for output directories and report rows.
    pub fn name(&self) -> String {
        match self {
            Variant::TintemFrozen => "tintem_frozen".into(),
            Variant::TintemWeighted { gamma } => format!("tintem_weighted_g{gamma}"),
            Variant::Proteus => "proteus".into(),
        }
    }

    pub fn is_tintem(&self) -> bool {
        !matches!(self, Variant::Proteus)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentMetric {
    #[default]
    Cosine,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub variant: Variant,
    pub student_metric: StudentMetric,
    pub temperatures: TemperatureSet,
    pub head_lr: f64,
    pub student_lr: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub head_seed: u64,
    pub student_seed: u64,
    pub shuffle_seed: u64,
    /// Include the per-sample token terms alongside the class-token terms.
    pub feature_term: bool,
    pub d_student: usize,
    pub student_hidden: usize,
    pub head_norm: NormMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TintemFrozen,
            student_metric: StudentMetric::Cosine,
            temperatures: TemperatureSet::default_set(),
            head_lr: 1e-2,
            student_lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            epochs: 30,
            head_seed: 1,
            student_seed: 2,
            shuffle_seed: 3,
            feature_term: true,
            d_student: 16,
            student_hidden: 64,
            head_norm: NormMode::LayerNorm,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |msg: String| Err(DistillError::Config(msg));
        if let Variant::TintemWeighted { gamma } = self.variant {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return bad(format!("gamma must be finite and > 0, got {gamma}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, lr) in [("head_lr", self.head_lr), ("student_lr", self.student_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if self.d_student == 0 || self.student_hidden == 0 {
            return bad("student dimensions must be positive".into());
        }
        match self.optimizer {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum must lie in [0, 1), got {momentum}"))
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                bad(format!("adam needs betas in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let mut c = DistillConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = DistillConfig::default();
        c.variant = Variant::TintemWeighted { gamma: 0.0 };
        assert!(c.validate().is_err());
        let mut c = DistillConfig::default();
        c.optimizer = OptimizerConfig::Sgd { momentum: 1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn serde_shapes() {
        let c = DistillConfig {
            variant: Variant::TintemWeighted { gamma: 10.0 },
            ..DistillConfig::default()
        };
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<DistillConfig>(&s).unwrap(), c);
        let v: DistillConfig = toml::from_str("variant = \"proteus\"\noptimizer = { kind = \"sgd\", momentum = 0.9 }").unwrap();
        assert_eq!(v.variant, Variant::Proteus);
        assert!(toml::from_str::<DistillConfig>("bogus = 1").is_err());
        assert_eq!(Variant::TintemWeighted { gamma: 10.0 }.name(), "tintem_weighted_g10");
    }
}

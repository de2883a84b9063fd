//! Loss composition, optimizer and schedule, the training loop with its
//! per-step gradient-routing audit, and the insertion-position ablation.

pub mod loss;
pub mod optim;
pub mod run;

pub use loss::{build_loss, LossBuild, Models};
pub use optim::{poly_lr, Adam, AdamConfig, Schedule};
pub use run::{train, AuditSummary, EpochLog, TrainOutcome, TrainSpec};

use crate::error::{Error, Result};
use crate::task::AuxPosition;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Rate plus image-reconstruction distortion.
    #[serde(alias = "RdImage")]
    RdImage,
    /// Rate plus feature-distillation distortion over recognizer taps.
    #[serde(alias = "Distill")]
    Distill,
    /// Rate plus the recognizer's task loss against teacher labels.
    #[serde(alias = "Task")]
    Task,
    /// Task loss plus the weighted auxiliary-branch task loss.
    #[serde(alias = "TaskAux")]
    TaskAux,
    /// TaskAux plus an image-reconstruction stabilizer.
    #[serde(alias = "TaskAuxMse")]
    TaskAuxMse,
}

impl LossVariant {
    pub fn uses_aux(self) -> bool {
        matches!(self, LossVariant::TaskAux | LossVariant::TaskAuxMse)
    }

    pub fn uses_recognizer(self) -> bool {
        !matches!(self, LossVariant::RdImage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::RdImage => "rd_image",
            LossVariant::Distill => "distill",
            LossVariant::Task => "task",
            LossVariant::TaskAux => "task_aux",
            LossVariant::TaskAuxMse => "task_aux_mse",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub lambda: f64,
    /// Weight of the auxiliary term; only TaskAux/TaskAuxMse read it.
    pub alpha: f64,
    pub position: AuxPosition,
    pub distill_layers: Vec<String>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::Task,
            lambda: 1.0,
            alpha: 0.5,
            position: AuxPosition::AuxEnc,
            distill_layers: vec!["stage3".into()],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.variant == LossVariant::Distill && self.distill_layers.is_empty() {
            return Err(Error::Config("distill needs at least one tap".into()));
        }
        Ok(())
    }
}

/// Scalar record of one loss evaluation. `total` is recombined in f64 from
/// the components, so it reproduces from the fields exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub r_bits: f64,
    pub r_bpp: f64,
    pub d_image: f64,
    pub d_distill: f64,
    pub d_task: f64,
    pub d_aux: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossTerms {
    /// The weighted recombination the `total` field is defined by.
    pub fn recombine(&self, variant: LossVariant) -> f64 {
        let d = match variant {
            LossVariant::RdImage => self.d_image,
            LossVariant::Distill => self.d_distill,
            LossVariant::Task => self.d_task,
            LossVariant::TaskAux => self.d_task + self.alpha * self.d_aux,
            LossVariant::TaskAuxMse => self.d_task + self.alpha * self.d_aux + self.d_image,
        };
        self.r_bpp + self.lambda * d
    }

    /// The deployment objective: same recombination with the training-only
    /// auxiliary term dropped. Validation totals use this so variants with
    /// and without a branch stay comparable.
    pub fn recombine_main(&self, variant: LossVariant) -> f64 {
        let d = match variant {
            LossVariant::RdImage => self.d_image,
            LossVariant::Distill => self.d_distill,
            LossVariant::Task | LossVariant::TaskAux => self.d_task,
            LossVariant::TaskAuxMse => self.d_task + self.d_image,
        };
        self.r_bpp + self.lambda * d
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Learning-rate multiplier for the entropy model's distribution
    /// parameters; scalar location/scale values adapt much faster than conv
    /// weights can tolerate.
    pub entropy_lr_scale: f64,
    /// Steps between gradient-routing audits; None picks 1 in debug builds
    /// and 100 in release builds.
    pub audit_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            lr0: 2e-3,
            schedule: Schedule::Poly {
                power: 1.0,
                start_epoch: 0,
            },
            seed: 1,
            adam: AdamConfig::default(),
            entropy_lr_scale: 10.0,
            audit_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_audit_interval(&self) -> usize {
        self.audit_interval.unwrap_or(if cfg!(debug_assertions) {
            1
        } else {
            100
        })
    }
}

/// Dataset split sizes and the seed their contents derive from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: u64,
    pub n_val: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1000,
            n_train: 192,
            n_val: 24,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recombination_matches_definition() {
        let t = LossTerms {
            r_bits: 4096.0,
            r_bpp: 1.0,
            d_image: 0.01,
            d_distill: 0.0,
            d_task: 0.4,
            d_aux: 0.6,
            lambda: 2.0,
            alpha: 0.5,
            total: 0.0,
        };
        assert!((t.recombine(LossVariant::RdImage) - 1.02).abs() < 1e-12);
        assert!((t.recombine(LossVariant::Task) - 1.8).abs() < 1e-12);
        assert!((t.recombine(LossVariant::TaskAux) - 2.4).abs() < 1e-12);
        assert!((t.recombine(LossVariant::TaskAuxMse) - 2.42).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        c.lambda = 1.0;
        c.alpha = -0.1;
        assert!(c.validate().is_err());
    }
}

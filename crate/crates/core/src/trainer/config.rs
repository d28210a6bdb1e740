use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::models::{Branch, EncoderKind, ModelConfig, ParamGroup};

/// Momentum SGD with decoupled per-encoder learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rate for encoders of transformer kind and their classifiers.
    pub lr_vit: f64,
    /// Rate for encoders of convolutional kind and their classifiers.
    pub lr_cnn: f64,
    /// Overrides the classifier rate; `None` inherits the owning encoder's.
    pub lr_classifiers: Option<f64>,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_vit: 1e-4,
            lr_cnn: 5e-4,
            lr_classifiers: None,
            batch_size: 4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CdaError::Config(format!("{name} must be a positive finite rate, got {v}")))
            }
        };
        positive("lr_vit", self.lr_vit)?;
        positive("lr_cnn", self.lr_cnn)?;
        if let Some(lr) = self.lr_classifiers {
            positive("lr_classifiers", lr)?;
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CdaError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CdaError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(CdaError::Config(format!(
                "batch_size must be >= 2 so mixed batches have both halves, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Learning rate of one parameter group, assigned by the kind of encoder
    /// occupying the group's branch slot.
    pub fn lr(&self, model: &ModelConfig, group: ParamGroup) -> f64 {
        let by_kind = match model.encoder(group.branch()).kind() {
            EncoderKind::Vit => self.lr_vit,
            EncoderKind::Cnn => self.lr_cnn,
        };
        match group {
            ParamGroup::Encoder(_) => by_kind,
            ParamGroup::Classifier(_) => self.lr_classifiers.unwrap_or(by_kind),
        }
    }
}

/// How often frozen parameter groups are fingerprinted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeAudit {
    /// Groups frozen for a whole stage, checked at every epoch end.
    Epoch,
    /// Additionally, every group excluded from a step, checked around that step.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub epochs_stage1: usize,
    /// Each epoch alternates one boundary and one consolidation step per mixed batch.
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    /// Consistency gate: a sample passes when JSD(snapshot, current) < tau.
    pub tau: f64,
    /// Confidence threshold for transformer-teaches-conv pseudo-labels.
    pub theta1: f64,
    /// Confidence threshold for conv-teaches-transformer pseudo-labels.
    pub theta2: f64,
    /// Focusing exponent of the source focal loss; class weights come from
    /// inverse source frequencies.
    pub focal_gamma: f64,
    pub freeze_audit: FreezeAudit,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            epochs_stage1: 20,
            epochs_stage2: 10,
            epochs_stage3: 10,
            tau: 0.1,
            theta1: 0.5,
            theta2: 0.8,
            focal_gamma: 2.0,
            freeze_audit: FreezeAudit::Epoch,
        }
    }
}

impl StagePlan {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= std::f64::consts::LN_2) {
            return Err(CdaError::Config(format!("tau must lie in (0, ln 2], got {}", self.tau)));
        }
        let floor = 1.0 / num_classes as f64;
        for (name, t) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if !(t > floor && t < 1.0) {
                return Err(CdaError::Config(format!(
                    "{name} must lie in (1/{num_classes}, 1), got {t}"
                )));
            }
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(CdaError::Config(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    Full,
    S1,
    S12,
    S13,
    S23,
    V2c,
    C2v,
    Reversed,
    InferVit,
    CnnCnn,
    VitVit,
}

/// Which encoder configuration fills both branch slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbones {
    Mixed,
    BothCnn,
    BothVit,
}

/// The stage subset and loss directions a variant executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantSpec {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
    pub v2c: bool,
    pub c2v: bool,
    /// Stage 2 explores with the conv encoder and consolidates the transformer.
    pub reversed: bool,
    pub inference: Branch,
    pub backbones: Backbones,
}

impl VariantId {
    pub const ALL: [VariantId; 11] = [
        VariantId::Full,
        VariantId::S1,
        VariantId::S12,
        VariantId::S13,
        VariantId::S23,
        VariantId::V2c,
        VariantId::C2v,
        VariantId::Reversed,
        VariantId::InferVit,
        VariantId::CnnCnn,
        VariantId::VitVit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::Full => "full",
            VariantId::S1 => "s1",
            VariantId::S12 => "s12",
            VariantId::S13 => "s13",
            VariantId::S23 => "s23",
            VariantId::V2c => "v2c",
            VariantId::C2v => "c2v",
            VariantId::Reversed => "reversed",
            VariantId::InferVit => "infer_vit",
            VariantId::CnnCnn => "cnn_cnn",
            VariantId::VitVit => "vit_vit",
        }
    }

    pub fn spec(self) -> VariantSpec {
        let full = VariantSpec {
            stage1: true,
            stage2: true,
            stage3: true,
            v2c: true,
            c2v: true,
            reversed: false,
            inference: Branch::Cnn,
            backbones: Backbones::Mixed,
        };
        match self {
            VariantId::Full => full,
            VariantId::S1 => VariantSpec {
                stage2: false,
                stage3: false,
                ..full
            },
            VariantId::S12 => VariantSpec { stage3: false, ..full },
            VariantId::S13 => VariantSpec { stage2: false, ..full },
            VariantId::S23 => VariantSpec { stage1: false, ..full },
            VariantId::V2c => VariantSpec { c2v: false, ..full },
            VariantId::C2v => VariantSpec { v2c: false, ..full },
            VariantId::Reversed => VariantSpec { reversed: true, ..full },
            VariantId::InferVit => VariantSpec {
                inference: Branch::Vit,
                ..full
            },
            VariantId::CnnCnn => VariantSpec {
                backbones: Backbones::BothCnn,
                ..full
            },
            VariantId::VitVit => VariantSpec {
                backbones: Backbones::BothVit,
                ..full
            },
        }
    }

    /// The model configuration this variant trains, derived from the base one.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self.spec().backbones {
            Backbones::Mixed => {}
            Backbones::BothCnn => cfg.encoder_v = cfg.encoder_c.clone(),
            Backbones::BothVit => cfg.encoder_c = cfg.encoder_v.clone(),
        }
        cfg
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = CdaError;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = VariantId::ALL.iter().map(|v| v.as_str()).collect();
            CdaError::InvalidInput(format!("unknown variant '{s}'; valid ids: {}", valid.join(", ")))
        })
    }
}

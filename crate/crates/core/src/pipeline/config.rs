use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::DomainSpec;
use crate::error::{CdaError, Result};
use crate::models::{Branch, ModelConfig};
use crate::trainer::{OptimizerConfig, StagePlan, VariantId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Directory holding `manifest.json`; without it the benchmark is
    /// synthesized in memory from the two specs and the data seed.
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            manifest: None,
        }
    }
}

impl DataConfig {
    /// The two domain specs with the data seed applied.
    pub fn seeded_specs(&self, data_seed: u64) -> (DomainSpec, DomainSpec) {
        let (mut s, mut t) = (self.source.clone(), self.target.clone());
        s.base_seed = data_seed;
        t.base_seed = data_seed;
        (s, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub repeats: usize,
    /// Variants trained on the same splits and seeds for paired comparison.
    pub baselines: Vec<VariantId>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 5,
            repeats: 5,
            baselines: Vec::new(),
        }
    }
}

/// The only sources of randomness in an experiment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Phantom generation.
    pub data: u64,
    /// Parameter initialization and all in-training draws.
    pub init: u64,
    /// Cross-validation splits.
    pub cv: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub plan: StagePlan,
    pub opt: OptimizerConfig,
    pub variant: VariantId,
    /// Overrides the variant's own inference branch.
    pub inference_branch: Option<Branch>,
    pub cv: CvConfig,
    pub seeds: SeedConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            plan: StagePlan::default(),
            opt: OptimizerConfig::default(),
            variant: VariantId::Full,
            inference_branch: None,
            cv: CvConfig::default(),
            seeds: SeedConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CdaError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CdaError::json(path, e))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self).map_err(|e| CdaError::json("config", e))?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CdaError::io(path, e))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise; every key must already exist.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(|e| CdaError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CdaError::Config(format!("override '{item}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            for part in key.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(part),
                    Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| CdaError::Config(format!("unknown config key '{key}'")))?;
            }
            *node = value;
        }
        serde_json::from_value(root).map_err(|e| CdaError::Config(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate(self.model.classifier.num_classes)?;
        self.opt.validate()?;
        if self.cv.k < 2 || self.cv.repeats == 0 {
            return Err(CdaError::Config(format!(
                "cross-validation needs k >= 2 and repeats >= 1, got k={} repeats={}",
                self.cv.k, self.cv.repeats
            )));
        }
        Ok(())
    }

    pub fn inference(&self, variant: VariantId) -> Branch {
        self.inference_branch.unwrap_or(variant.spec().inference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_fill_missing_fields() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_slice(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"variant": "s1", "seeds": {"cv": 4}}"#).unwrap();
        assert_eq!(partial.variant, VariantId::S1);
        assert_eq!(partial.seeds.cv, 4);
        assert_eq!(partial.plan, StagePlan::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "plan.tau=0.2".into(),
                "variant=c2v".into(),
                "data.source.n_per_class.2=5".into(),
                "model.input_dims=[8,8,8]".into(),
            ])
            .unwrap();
        assert_eq!(cfg.plan.tau, 0.2);
        assert_eq!(cfg.variant, VariantId::C2v);
        assert_eq!(cfg.data.source.n_per_class, vec![56, 110, 5]);
        assert_eq!(cfg.model.input_dims, [8, 8, 8]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let cfg = ExperimentConfig::default();
        for bad in ["plan.nope=1", "plan", "variant=bogus", "plan.tau=\"x\""] {
            assert!(matches!(cfg.with_overrides(&[bad.into()]), Err(CdaError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epochs": 3}"#).is_err());
    }

    #[test]
    fn inference_branch_defaults_to_variant() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.inference(VariantId::Full), Branch::Cnn);
        assert_eq!(cfg.inference(VariantId::InferVit), Branch::Vit);
        cfg.inference_branch = Some(Branch::Vit);
        assert_eq!(cfg.inference(VariantId::Full), Branch::Vit);
    }
}

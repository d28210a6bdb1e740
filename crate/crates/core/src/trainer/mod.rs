//! Three-stage training: supervised source training, discrepancy-driven
//! target adaptation, and collaborative pseudo-label training, plus the
//! ablation variants built from subsets of those stages.

mod batching;
mod config;
mod freeze;
mod optim;
mod stages;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batching::{balanced_batches, shuffled_batches, MixedBatch};
pub use config::{Backbones, FreezeAudit, OptimizerConfig, StagePlan, VariantId, VariantSpec};
pub use freeze::FreezeGuard;
pub use optim::{sgd_step, sgd_update};
pub use stages::{consistency_gate, run_stage1, run_stage2, run_stage3, view_seed, Directions};

use crate::datagen::Volume;
use crate::error::{CdaError, Result};
use crate::losses::ProbabilityVector;
use crate::models::{Branch, CdaModel, ClassifierSnapshot, ModelConfig};
use crate::nn::Real;

/// Training inputs: labeled source volumes and unlabeled target volumes.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    pub source: Vec<(&'a Volume, usize)>,
    pub target: Vec<&'a Volume>,
}

/// One record per epoch of any stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
    /// Fractions of the epoch's target samples passing each gate or mask.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rates: BTreeMap<String, f64>,
    /// Groups whose fingerprints were verified unchanged at the end of the epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_verified: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// How often each code path ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounters {
    pub stage1_steps: usize,
    pub stage2_boundary_steps: usize,
    pub stage2_consolidation_steps: usize,
    pub stage3_steps: usize,
    pub v2c_evaluations: usize,
    pub c2v_evaluations: usize,
}

/// Stage-2 phase effects. The exploring encoder is frozen, so discrepancy on
/// its target features moves only through boundary steps; consolidation is
/// measured per step, before and after, on the step's own batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Probe {
    pub explore_encoder: Branch,
    pub explore_dl_start: f64,
    pub explore_dl_end: f64,
    pub mean_dl_gain: f64,
    pub mean_l4_delta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<R> {
    pub model: CdaModel<R>,
    pub snapshot: Option<ClassifierSnapshot<R>>,
    pub log: Vec<EpochLog>,
    pub counters: StageCounters,
    pub stage2_probe: Option<Stage2Probe>,
}

impl<R: Real> TrainState<R> {
    pub fn new(model: CdaModel<R>) -> Self {
        TrainState {
            model,
            snapshot: None,
            log: Vec::new(),
            counters: StageCounters::default(),
            stage2_probe: None,
        }
    }

    /// Writes the epoch log as JSON lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec).map_err(|e| CdaError::json(path, e))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| CdaError::io(path, e))?;
        f.write_all(&out).map_err(|e| CdaError::io(path, e))
    }
}

/// Training randomness: parameter initialization and everything inside the
/// stages (batch order, augmentation draws).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub init: u64,
    pub train: u64,
}

/// Trains one variant from scratch. `on_stage_end` sees the state after each
/// stage that actually ran.
pub fn run_variant_with<R: Real>(
    variant: VariantId,
    base: &ModelConfig,
    data: &TrainingSet<'_>,
    plan: &StagePlan,
    opt: &OptimizerConfig,
    seeds: RunSeeds,
    on_stage_end: &mut dyn FnMut(u8, &TrainState<R>) -> Result<()>,
) -> Result<TrainState<R>> {
    let spec = variant.spec();
    let cfg = variant.model_config(base);
    plan.validate(cfg.classifier.num_classes)?;
    opt.validate()?;
    let mut state = TrainState::new(CdaModel::<R>::init(&cfg, seeds.init)?);
    if spec.stage1 {
        run_stage1(&mut state, &data.source, plan, opt, seeds.train)?;
        on_stage_end(1, &state)?;
    } else {
        state.snapshot = Some(state.model.snapshot_classifiers(false));
        state.log.push(EpochLog {
            note: Some("no supervised snapshot: classifiers snapshotted at initialization".into()),
            ..EpochLog::default()
        });
    }
    if spec.stage2 {
        run_stage2(&mut state, data, plan, opt, seeds.train, spec.reversed)?;
        on_stage_end(2, &state)?;
    }
    if spec.stage3 {
        let directions = Directions {
            v2c: spec.v2c,
            c2v: spec.c2v,
        };
        run_stage3(&mut state, &data.target, plan, opt, seeds.train, directions)?;
        on_stage_end(3, &state)?;
    }
    Ok(state)
}

pub fn run_variant<R: Real>(
    variant: VariantId,
    base: &ModelConfig,
    data: &TrainingSet<'_>,
    plan: &StagePlan,
    opt: &OptimizerConfig,
    seeds: RunSeeds,
) -> Result<TrainState<R>> {
    run_variant_with(variant, base, data, plan, opt, seeds, &mut |_, _| Ok(()))
}

/// Class and probabilities from one branch; ties resolve to the lower index.
pub fn predict<R: Real>(model: &CdaModel<R>, volume: &Volume, branch: Branch) -> Result<(usize, ProbabilityVector)> {
    let x = model.prepare_input(volume)?;
    let p = ProbabilityVector::from_logits(&model.logits(branch, branch, &x)?)?;
    Ok((p.argmax(), p))
}

use std::collections::BTreeMap;

use super::batching::{balanced_batches, shuffled_batches};
use super::config::{FreezeAudit, OptimizerConfig, StagePlan};
use super::freeze::FreezeGuard;
use super::optim::sgd_step;
use super::{EpochLog, Stage2Probe, TrainState, TrainingSet};
use crate::augment::{strong_augment, weak_augment};
use crate::error::{CdaError, Result};
use crate::losses::objectives::{
    cross_branch_loss, stage1_loss, stage2_boundary_loss, stage2_consolidation_loss, BoundaryBatch, Direction, Grad,
};
use crate::losses::{discrepancy_kernel, jsd, pseudo_label, FocalParams, ProbabilityVector};
use crate::models::{softmax, Branch, CdaModel, ParamGroup};
use crate::nn::Real;
use crate::seed::{self, stream};

/// Stream tag per stage so each stage's randomness is independent of which
/// stages ran before it.
fn stage_seed(train_seed: u64, stage: u64) -> u64 {
    seed::derive(&[train_seed, stage])
}

fn branch_groups(b: Branch) -> [ParamGroup; 2] {
    [ParamGroup::Encoder(b), ParamGroup::Classifier(b)]
}

fn step<R: Real>(
    model: &mut CdaModel<R>,
    updated: &[ParamGroup],
    opt: &OptimizerConfig,
    audit: FreezeAudit,
    context: &str,
) -> Result<()> {
    if audit == FreezeAudit::Step {
        let guard = FreezeGuard::complement(model, updated);
        sgd_step(model, updated, opt);
        guard.verify(model, context)
    } else {
        sgd_step(model, updated, opt);
        Ok(())
    }
}

fn source_focal(source: &[(&crate::datagen::Volume, usize)], k: usize, gamma: f64) -> FocalParams {
    let mut counts = vec![0usize; k];
    for &(_, y) in source {
        if y < k {
            counts[y] += 1;
        }
    }
    FocalParams::inverse_frequency(&counts, gamma)
}

fn group_names(guard: &FreezeGuard) -> Vec<String> {
    guard.groups().map(|g| g.to_string()).collect()
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Supervised source training of both branches on identical batches, each
/// with its own parameters and momentum. Ends by snapshotting the classifiers.
pub fn run_stage1<R: Real>(
    state: &mut TrainState<R>,
    source: &[(&crate::datagen::Volume, usize)],
    plan: &StagePlan,
    opt: &OptimizerConfig,
    train_seed: u64,
) -> Result<()> {
    if source.is_empty() {
        return Err(CdaError::Config("stage 1 needs labeled source samples".into()));
    }
    let model = &mut state.model;
    let k = model.num_classes();
    plan.validate(k)?;
    opt.validate()?;
    let focal = source_focal(source, k, plan.focal_gamma);
    let inputs: Vec<(Vec<R>, usize)> = source
        .iter()
        .map(|&(v, y)| Ok((model.prepare_input(v)?, y)))
        .collect::<Result<_>>()?;
    let seed = stage_seed(train_seed, 1);
    model.reset_velocity();

    for epoch in 0..plan.epochs_stage1 {
        let (mut l1, mut l2) = (0.0, 0.0);
        let batches = shuffled_batches(inputs.len(), opt.batch_size, seed, epoch);
        for batch in &batches {
            let pairs: Vec<(&[R], usize)> = batch.iter().map(|&i| (inputs[i].0.as_slice(), inputs[i].1)).collect();
            for (b, sum) in [(Branch::Vit, &mut l1), (Branch::Cnn, &mut l2)] {
                model.zero_grad();
                *sum += stage1_loss(model, b, &pairs, &focal, Grad::Accumulate)?;
                step(model, &branch_groups(b), opt, plan.freeze_audit, "stage 1")?;
            }
        }
        state.counters.stage1_steps += batches.len();
        state.log.push(EpochLog {
            stage: 1,
            epoch,
            losses: BTreeMap::from([
                ("l1".into(), mean(l1, batches.len())),
                ("l2".into(), mean(l2, batches.len())),
            ]),
            ..EpochLog::default()
        });
    }
    state.snapshot = Some(state.model.snapshot_classifiers(true));
    Ok(())
}

/// Mean discrepancy of the two live classifiers over cached features.
fn mean_feature_discrepancy<R: Real>(model: &CdaModel<R>, feats: &[Vec<R>]) -> Result<f64> {
    let mut sum = 0.0;
    for f in feats {
        let pv = softmax(&model.classifier(Branch::Vit).logits(f)?);
        let pc = softmax(&model.classifier(Branch::Cnn).logits(f)?);
        sum += discrepancy_kernel(&pv, &pc).0.to_f64().unwrap_or(f64::NAN);
    }
    Ok(mean(sum, feats.len()))
}

/// Target adaptation by classifier discrepancy. Per mixed batch: a boundary
/// step updates only the two classifiers on features of the exploring encoder,
/// then a consolidation step updates only the consolidating encoder on the
/// batch's target half. The exploring encoder is frozen for the whole stage
/// (transformer normally, conv when `reversed`).
pub fn run_stage2<R: Real>(
    state: &mut TrainState<R>,
    data: &TrainingSet<'_>,
    plan: &StagePlan,
    opt: &OptimizerConfig,
    train_seed: u64,
    reversed: bool,
) -> Result<()> {
    if data.target.is_empty() {
        return Err(CdaError::Config("stage 2 needs target samples".into()));
    }
    if data.source.is_empty() {
        return Err(CdaError::Config("stage 2 needs labeled source samples".into()));
    }
    let model = &mut state.model;
    let k = model.num_classes();
    plan.validate(k)?;
    opt.validate()?;
    let focal = source_focal(&data.source, k, plan.focal_gamma);
    let explore = if reversed { Branch::Cnn } else { Branch::Vit };
    let consolidate = explore.other();

    let src: Vec<(Vec<R>, usize)> = data
        .source
        .iter()
        .map(|&(v, y)| Ok((model.prepare_input(v)?, y)))
        .collect::<Result<_>>()?;
    let tgt: Vec<Vec<R>> = data.target.iter().map(|v| model.prepare_input(v)).collect::<Result<_>>()?;
    // frozen all stage, so computed once
    let tgt_explore: Vec<Vec<R>> = tgt.iter().map(|x| model.encode(explore, x)).collect();
    let src_explore: Vec<Vec<R>> = src.iter().map(|(x, _)| model.encode(explore, x)).collect();

    let seed = stage_seed(train_seed, 2);
    let dl_start = mean_feature_discrepancy(model, &tgt_explore)?;
    model.reset_velocity();
    let boundary_groups = [ParamGroup::Classifier(Branch::Vit), ParamGroup::Classifier(Branch::Cnn)];
    let consolidation_groups = [ParamGroup::Encoder(consolidate)];
    let stage_guard = FreezeGuard::capture(model, &[ParamGroup::Encoder(explore)]);
    let (mut gain_sum, mut delta_sum, mut steps_total) = (0.0, 0.0, 0usize);

    for epoch in 0..plan.epochs_stage2 {
        let batches = balanced_batches(src.len(), tgt.len(), opt.batch_size, seed, epoch)?;
        let mut acc: BTreeMap<&str, f64> = BTreeMap::new();
        for mb in &batches {
            let target_feats: Vec<Vec<R>> = mb.target.iter().map(|&i| tgt_explore[i].clone()).collect();
            let explore_src: Vec<(Vec<R>, usize)> =
                mb.source.iter().map(|&i| (src_explore[i].clone(), src[i].1)).collect();
            let consolidate_src: Vec<(Vec<R>, usize)> = mb
                .source
                .iter()
                .map(|&i| (model.encode(consolidate, &src[i].0), src[i].1))
                .collect();
            let (source_vit, source_cnn) = match explore {
                Branch::Vit => (&explore_src, &consolidate_src),
                Branch::Cnn => (&consolidate_src, &explore_src),
            };
            let batch = BoundaryBatch {
                target: &target_feats,
                source_vit,
                source_cnn,
            };

            model.zero_grad();
            let before = stage2_boundary_loss(model, &batch, &focal, Grad::Accumulate)?;
            step(model, &boundary_groups, opt, plan.freeze_audit, "stage 2 boundary exploration")?;
            let after = stage2_boundary_loss(model, &batch, &focal, Grad::ValueOnly)?;

            let targets: Vec<&[R]> = mb.target.iter().map(|&i| tgt[i].as_slice()).collect();
            model.zero_grad();
            let l4 = stage2_consolidation_loss(model, consolidate, &targets, Grad::Accumulate)?;
            step(model, &consolidation_groups, opt, plan.freeze_audit, "stage 2 feature consolidation")?;
            let l4_after = stage2_consolidation_loss(model, consolidate, &targets, Grad::ValueOnly)?;

            *acc.entry("l3").or_default() += before.total;
            *acc.entry("target_dl").or_default() += before.target_discrepancy;
            *acc.entry("dl_gain").or_default() += after.target_discrepancy - before.target_discrepancy;
            *acc.entry("l4").or_default() += l4;
            *acc.entry("l4_delta").or_default() += l4_after - l4;
        }
        let n = batches.len();
        gain_sum += acc.get("dl_gain").copied().unwrap_or(0.0);
        delta_sum += acc.get("l4_delta").copied().unwrap_or(0.0);
        steps_total += n;
        state.counters.stage2_boundary_steps += n;
        state.counters.stage2_consolidation_steps += n;
        stage_guard.verify(model, "stage 2")?;
        let mut losses: BTreeMap<String, f64> = acc.into_iter().map(|(k, v)| (k.to_string(), mean(v, n))).collect();
        losses.insert("explore_dl".into(), mean_feature_discrepancy(model, &tgt_explore)?);
        state.log.push(EpochLog {
            stage: 2,
            epoch,
            losses,
            frozen_verified: group_names(&stage_guard),
            ..EpochLog::default()
        });
    }
    state.stage2_probe = Some(Stage2Probe {
        explore_encoder: explore,
        explore_dl_start: dl_start,
        explore_dl_end: mean_feature_discrepancy(model, &tgt_explore)?,
        mean_dl_gain: mean(gain_sum, steps_total),
        mean_l4_delta: mean(delta_sum, steps_total),
    });
    Ok(())
}

/// Consistency gate: the fused pseudo-label `(q_star + q) / 2` when
/// `JSD(q_star, q) < tau`, otherwise `None`. Accepts any `tau > 0`.
pub fn consistency_gate(q_star: &ProbabilityVector, q: &ProbabilityVector, tau: f64) -> Result<Option<ProbabilityVector>> {
    if jsd(q_star, q)? < tau {
        pseudo_label(q_star, q).map(Some)
    } else {
        Ok(None)
    }
}

/// Which cross-branch losses stage 3 applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Directions {
    pub v2c: bool,
    pub c2v: bool,
}

impl Directions {
    pub const BOTH: Directions = Directions { v2c: true, c2v: true };

    fn enabled(self) -> Vec<Direction> {
        let mut d = Vec::new();
        if self.v2c {
            d.push(Direction::VitToCnn);
        }
        if self.c2v {
            d.push(Direction::CnnToVit);
        }
        d
    }
}

/// Augmentation seed of one view of one target sample in one epoch.
pub fn view_seed(train_seed: u64, epoch: usize, sample: usize, strong: bool) -> u64 {
    seed::derive(&[
        stage_seed(train_seed, 3),
        stream::AUGMENT,
        epoch as u64,
        sample as u64,
        u64::from(strong),
    ])
}

/// Collaborative training on target batches. For each teacher branch, gated
/// pseudo-labels come from the snapshot and live classifier on the weak view;
/// the student branch is trained on the strong view. Both directions are
/// evaluated at the pre-step parameters and applied in one step.
pub fn run_stage3<R: Real>(
    state: &mut TrainState<R>,
    target: &[&crate::datagen::Volume],
    plan: &StagePlan,
    opt: &OptimizerConfig,
    train_seed: u64,
    directions: Directions,
) -> Result<()> {
    if target.is_empty() {
        return Err(CdaError::Config("stage 3 needs target samples".into()));
    }
    let snapshot = state
        .snapshot
        .clone()
        .ok_or_else(|| CdaError::Config("stage 3 needs classifier snapshots".into()))?;
    let model = &mut state.model;
    plan.validate(model.num_classes())?;
    opt.validate()?;
    let dirs = directions.enabled();
    let updated_union: Vec<ParamGroup> = dirs.iter().flat_map(|d| branch_groups(d.student())).collect();
    let stage_guard = FreezeGuard::complement(model, &updated_union);
    let snapshot_fps = Branch::BOTH.map(|b| snapshot.fingerprint(b));
    let seed = stage_seed(train_seed, 3);
    model.reset_velocity();

    for epoch in 0..plan.epochs_stage3 {
        let batches = shuffled_batches(target.len(), opt.batch_size, seed, epoch);
        let mut gate_pass: BTreeMap<Branch, usize> = BTreeMap::new();
        let mut mask_pass: BTreeMap<Direction, usize> = BTreeMap::new();
        let mut loss_sum: BTreeMap<Direction, f64> = BTreeMap::new();
        let mut seen = 0usize;
        for batch in &batches {
            let mut weak = Vec::with_capacity(batch.len());
            let mut strong = Vec::with_capacity(batch.len());
            for &i in batch {
                let w = weak_augment(target[i], view_seed(train_seed, epoch, i, false))?;
                let s = strong_augment(target[i], view_seed(train_seed, epoch, i, true))?;
                weak.push(model.prepare_input(&w)?);
                strong.push(model.prepare_input(&s)?);
            }
            seen += batch.len();

            let mut labels: BTreeMap<Branch, Vec<Option<ProbabilityVector>>> = BTreeMap::new();
            for t in dirs.iter().map(|d| d.teacher()) {
                let mut per_sample = Vec::with_capacity(weak.len());
                for x in &weak {
                    let f = model.encode(t, x);
                    let q_star = ProbabilityVector::from_logits(&snapshot.classifier(t).logits(&f)?)?;
                    let q = ProbabilityVector::from_logits(&model.classifier(t).logits(&f)?)?;
                    per_sample.push(consistency_gate(&q_star, &q, plan.tau)?);
                }
                *gate_pass.entry(t).or_default() += per_sample.iter().filter(|y| y.is_some()).count();
                labels.insert(t, per_sample);
            }

            model.zero_grad();
            let strong_refs: Vec<&[R]> = strong.iter().map(Vec::as_slice).collect();
            let mut updated = Vec::new();
            for &d in &dirs {
                let theta = match d {
                    Direction::VitToCnn => plan.theta1,
                    Direction::CnnToVit => plan.theta2,
                };
                let terms = cross_branch_loss(model, d, &strong_refs, &labels[&d.teacher()], theta, Grad::Accumulate)?;
                match d {
                    Direction::VitToCnn => state.counters.v2c_evaluations += 1,
                    Direction::CnnToVit => state.counters.c2v_evaluations += 1,
                }
                *mask_pass.entry(d).or_default() += terms.mask_count;
                *loss_sum.entry(d).or_default() += terms.loss;
                // a direction with no admitted sample has no loss term and takes no step
                if terms.mask_count > 0 {
                    updated.extend(branch_groups(d.student()));
                }
            }
            if !updated.is_empty() {
                step(model, &updated, opt, plan.freeze_audit, "stage 3")?;
            }
        }
        state.counters.stage3_steps += batches.len();
        stage_guard.verify(model, "stage 3")?;
        for (b, fp) in Branch::BOTH.iter().zip(&snapshot_fps) {
            if &snapshot.fingerprint(*b) != fp {
                return Err(CdaError::Invariant(format!("snapshot of {b} classifier changed during stage 3")));
            }
        }
        let mut losses = BTreeMap::new();
        let mut rates = BTreeMap::new();
        for (d, v) in &loss_sum {
            losses.insert(format!("l_{}", direction_tag(*d)), mean(*v, batches.len()));
        }
        for (b, n) in &gate_pass {
            rates.insert(format!("gate_{b}"), mean(*n as f64, seen));
        }
        for (d, n) in &mask_pass {
            rates.insert(format!("mask_{}", direction_tag(*d)), mean(*n as f64, seen));
        }
        let mut frozen_verified = group_names(&stage_guard);
        frozen_verified.extend(Branch::BOTH.iter().map(|b| format!("snapshot_{b}")));
        state.log.push(EpochLog {
            stage: 3,
            epoch,
            losses,
            rates,
            frozen_verified,
            note: None,
        });
    }
    Ok(())
}

fn direction_tag(d: Direction) -> &'static str {
    match d {
        Direction::VitToCnn => "v2c",
        Direction::CnnToVit => "c2v",
    }
}

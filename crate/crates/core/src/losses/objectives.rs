//! Stage objectives evaluated through the dual-branch model. With
//! `Grad::Accumulate` each function adds `dLoss/dparam` into the parameter
//! gradient buffers of exactly the groups that loss is allowed to update.

use serde::{Deserialize, Serialize};

use super::{confidence_mask, discrepancy_kernel, focal_kernel, soft_ce_kernel, FocalParams, ProbabilityVector};
use crate::error::{CdaError, Result};
use crate::models::{softmax, softmax_backward, Branch, CdaModel};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    ValueOnly,
    Accumulate,
}

/// Which branch teaches which in collaborative training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Transformer pseudo-labels supervise the conv branch.
    #[serde(rename = "v2c")]
    VitToCnn,
    /// Conv pseudo-labels supervise the transformer branch.
    #[serde(rename = "c2v")]
    CnnToVit,
}

impl Direction {
    pub fn teacher(self) -> Branch {
        match self {
            Direction::VitToCnn => Branch::Vit,
            Direction::CnnToVit => Branch::Cnn,
        }
    }

    pub fn student(self) -> Branch {
        self.teacher().other()
    }
}

fn scale<R: Real>(v: &mut [R], s: R) {
    v.iter_mut().for_each(|x| *x *= s);
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(CdaError::InvalidInput(format!("label {y} outside [0, {k})")));
    }
    Ok(())
}

/// Mean focal loss of `branch` (its own encoder and classifier) on labeled
/// source inputs. Gradients reach that branch's encoder and classifier.
pub fn stage1_loss<R: Real>(
    model: &mut CdaModel<R>,
    branch: Branch,
    batch: &[(&[R], usize)],
    focal: &FocalParams,
    grad: Grad,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let k = model.num_classes();
    focal.validate(k)?;
    let inv_n = R::c(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for &(input, y) in batch {
        check_label(y, k)?;
        let (feat, enc_cache) = model.encoder(branch).forward(input);
        let (logits, cls_cache) = model.classifier(branch).forward(&feat)?;
        let p = softmax(&logits);
        let (l, mut dp) = focal_kernel(&p, y, focal.gamma, focal.alpha[y]);
        total += l.to_f64().unwrap_or(f64::NAN);
        if grad == Grad::Accumulate {
            scale(&mut dp, inv_n);
            let dlogits = softmax_backward(&p, &dp);
            let dfeat = model.classifier_mut(branch).backward(&cls_cache, &dlogits);
            model.encoder_mut(branch).backward(&enc_cache, &dfeat);
        }
    }
    Ok(total / batch.len() as f64)
}

/// Inputs to the boundary-exploration objective, as features from frozen
/// encoders.
pub struct BoundaryBatch<'a, R> {
    /// Target features from the exploring encoder.
    pub target: &'a [Vec<R>],
    /// Source features from the transformer-slot encoder, with labels.
    pub source_vit: &'a [(Vec<R>, usize)],
    /// Source features from the conv-slot encoder, with labels.
    pub source_cnn: &'a [(Vec<R>, usize)],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTerms {
    pub total: f64,
    /// Mean target discrepancy (enters the total negated).
    pub target_discrepancy: f64,
    pub source_focal_vit: f64,
    pub source_focal_cnn: f64,
}

/// `-mean_t DL(F_V(f_t), F_C(f_t)) + mean_s FL(F_V(E_V x_s)) + mean_s FL(F_C(E_C x_s))`.
/// Gradients reach only the two classifiers. Empty halves contribute zero.
pub fn stage2_boundary_loss<R: Real>(
    model: &mut CdaModel<R>,
    batch: &BoundaryBatch<'_, R>,
    focal: &FocalParams,
    grad: Grad,
) -> Result<BoundaryTerms> {
    let k = model.num_classes();
    focal.validate(k)?;
    let acc = grad == Grad::Accumulate;

    let mut dl_sum = 0.0;
    if !batch.target.is_empty() {
        let w = R::c(-1.0 / batch.target.len() as f64);
        for f in batch.target {
            let (lv, cv) = model.classifier(Branch::Vit).forward(f)?;
            let (lc, cc) = model.classifier(Branch::Cnn).forward(f)?;
            let (pv, pc) = (softmax(&lv), softmax(&lc));
            let (d, mut dv, mut dc) = discrepancy_kernel(&pv, &pc);
            dl_sum += d.to_f64().unwrap_or(f64::NAN);
            if acc {
                scale(&mut dv, w);
                scale(&mut dc, w);
                model.classifier_mut(Branch::Vit).backward(&cv, &softmax_backward(&pv, &dv));
                model.classifier_mut(Branch::Cnn).backward(&cc, &softmax_backward(&pc, &dc));
            }
        }
    }

    let focal_term = |model: &mut CdaModel<R>, head: Branch, src: &[(Vec<R>, usize)]| -> Result<f64> {
        if src.is_empty() {
            return Ok(0.0);
        }
        let w = R::c(1.0 / src.len() as f64);
        let mut sum = 0.0;
        for (f, y) in src {
            check_label(*y, k)?;
            let (logits, cache) = model.classifier(head).forward(f)?;
            let p = softmax(&logits);
            let (l, mut dp) = focal_kernel(&p, *y, focal.gamma, focal.alpha[*y]);
            sum += l.to_f64().unwrap_or(f64::NAN);
            if acc {
                scale(&mut dp, w);
                model.classifier_mut(head).backward(&cache, &softmax_backward(&p, &dp));
            }
        }
        Ok(sum / src.len() as f64)
    };
    let source_focal_vit = focal_term(model, Branch::Vit, batch.source_vit)?;
    let source_focal_cnn = focal_term(model, Branch::Cnn, batch.source_cnn)?;

    let target_discrepancy = if batch.target.is_empty() {
        0.0
    } else {
        dl_sum / batch.target.len() as f64
    };
    Ok(BoundaryTerms {
        total: -target_discrepancy + source_focal_vit + source_focal_cnn,
        target_discrepancy,
        source_focal_vit,
        source_focal_cnn,
    })
}

/// Mean discrepancy between the two classifiers on features of `encoder`.
/// Gradients reach only that encoder; the classifiers are read, not updated.
pub fn stage2_consolidation_loss<R: Real>(
    model: &mut CdaModel<R>,
    encoder: Branch,
    targets: &[&[R]],
    grad: Grad,
) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let w = R::c(1.0 / targets.len() as f64);
    // scratch copies so classifier gradient buffers stay untouched
    let mut heads = (
        model.classifier(Branch::Vit).clone(),
        model.classifier(Branch::Cnn).clone(),
    );
    let mut total = 0.0;
    for input in targets {
        let (feat, enc_cache) = model.encoder(encoder).forward(input);
        let (lv, cv) = heads.0.forward(&feat)?;
        let (lc, cc) = heads.1.forward(&feat)?;
        let (pv, pc) = (softmax(&lv), softmax(&lc));
        let (d, mut dv, mut dc) = discrepancy_kernel(&pv, &pc);
        total += d.to_f64().unwrap_or(f64::NAN);
        if grad == Grad::Accumulate {
            scale(&mut dv, w);
            scale(&mut dc, w);
            let mut dfeat = heads.0.backward(&cv, &softmax_backward(&pv, &dv));
            let df2 = heads.1.backward(&cc, &softmax_backward(&pc, &dc));
            for (a, b) in dfeat.iter_mut().zip(&df2) {
                *a += *b;
            }
            model.encoder_mut(encoder).backward(&enc_cache, &dfeat);
        }
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossBranchTerms {
    pub loss: f64,
    /// Samples that passed both the consistency gate and the confidence mask.
    pub mask_count: usize,
}

/// Mean soft cross-entropy of the student branch on strong views against
/// teacher pseudo-labels, over samples whose label is present (passed the
/// consistency gate) and clears `max(y_hat) > theta`. Pseudo-labels are
/// constants: gradients reach only the student's encoder and classifier.
pub fn cross_branch_loss<R: Real>(
    model: &mut CdaModel<R>,
    direction: Direction,
    strong_inputs: &[&[R]],
    pseudo_labels: &[Option<ProbabilityVector>],
    theta: f64,
    grad: Grad,
) -> Result<CrossBranchTerms> {
    if strong_inputs.len() != pseudo_labels.len() {
        return Err(CdaError::InvalidInput(format!(
            "{} strong views but {} pseudo-labels",
            strong_inputs.len(),
            pseudo_labels.len()
        )));
    }
    let k = model.num_classes();
    let selected: Vec<(usize, &ProbabilityVector)> = pseudo_labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.as_ref().map(|y| (i, y)))
        .filter(|(_, y)| confidence_mask(y, theta))
        .collect();
    if selected.is_empty() {
        return Ok(CrossBranchTerms {
            loss: 0.0,
            mask_count: 0,
        });
    }
    let student = direction.student();
    let w = R::c(1.0 / selected.len() as f64);
    let mut total = 0.0;
    for (i, y_hat) in &selected {
        if y_hat.len() != k {
            return Err(CdaError::InvalidInput(format!(
                "pseudo-label has {} classes, model has {k}",
                y_hat.len()
            )));
        }
        let target: Vec<R> = y_hat.to_real();
        let (feat, enc_cache) = model.encoder(student).forward(strong_inputs[*i]);
        let (logits, cls_cache) = model.classifier(student).forward(&feat)?;
        let p = softmax(&logits);
        let (l, mut dp) = soft_ce_kernel(&p, &target);
        total += l.to_f64().unwrap_or(f64::NAN);
        if grad == Grad::Accumulate {
            scale(&mut dp, w);
            let dfeat = model.classifier_mut(student).backward(&cls_cache, &softmax_backward(&p, &dp));
            model.encoder_mut(student).backward(&enc_cache, &dfeat);
        }
    }
    Ok(CrossBranchTerms {
        loss: total / selected.len() as f64,
        mask_count: selected.len(),
    })
}

#![allow(dead_code)]

use cda_core::losses::objectives::{
    cross_branch_loss, stage1_loss, stage2_boundary_loss, stage2_consolidation_loss, BoundaryBatch, Direction, Grad,
};
use cda_core::losses::{pseudo_label, FocalParams, ProbabilityVector};
use cda_core::models::{
    Branch, CdaModel, ClassifierConfig, CnnConfig, EncoderConfig, ModelConfig, ParamGroup, VitConfig,
};
use rand::Rng;

/// Widths <= 8 and a 2x2x2 input grid.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        input_dims: [2, 2, 2],
        encoder_v: EncoderConfig::Vit(VitConfig {
            patch_size: 1,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 1.0,
        }),
        encoder_c: EncoderConfig::Cnn(CnnConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 8,
        }),
        classifier: ClassifierConfig {
            hidden_dim: 8,
            num_classes: 3,
        },
    }
}

pub fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = cda_core::seed::rng(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.5)).collect())
        .collect()
}

pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    /// Sum of |analytic gradient| over groups the loss must not touch.
    pub foreign_grad: f64,
}

fn flat(model: &CdaModel<f64>, group: ParamGroup) -> Vec<(String, Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_group(group, &mut |n, p| out.push((n.to_string(), p.value.clone(), p.grad.clone())));
    out
}

fn nudge(model: &mut CdaModel<f64>, group: ParamGroup, name: &str, idx: usize, delta: f64) {
    model.visit_group_mut(group, &mut |n, p| {
        if n == name {
            p.value[idx] += delta;
        }
    });
}

/// Compares the analytic gradient of `loss` against central differences for
/// every scalar in `groups`, and sums analytic gradients left in the rest.
pub fn check_gradients(
    model: &mut CdaModel<f64>,
    groups: &[ParamGroup],
    loss: &dyn Fn(&mut CdaModel<f64>, Grad) -> f64,
) -> GradReport {
    const H: f64 = 1e-4;
    model.zero_grad();
    loss(model, Grad::Accumulate);
    let mut foreign_grad = 0.0;
    for g in ParamGroup::ALL {
        if !groups.contains(&g) {
            for (_, _, grad) in flat(model, g) {
                foreign_grad += grad.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
    }
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        worst_name: String::new(),
        foreign_grad,
    };
    for &g in groups {
        for (name, values, grads) in flat(model, g) {
            for i in 0..values.len() {
                nudge(model, g, &name, i, H);
                let up = loss(model, Grad::ValueOnly);
                nudge(model, g, &name, i, -2.0 * H);
                let down = loss(model, Grad::ValueOnly);
                nudge(model, g, &name, i, H);
                let numeric = (up - down) / (2.0 * H);
                let analytic = grads[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if rel > report.worst_rel {
                    report.worst_rel = rel;
                    report.worst_name = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
                }
                report.checked += 1;
            }
        }
    }
    report
}

pub fn focal3() -> FocalParams {
    FocalParams {
        gamma: 2.0,
        alpha: vec![0.7, 1.1, 1.2],
    }
}

/// Zero-initialized biases put ReLU pre-activations exactly on the kink in a
/// 1x1x1 grid, where central differences are meaningless.
pub fn jitter_biases(model: &mut CdaModel<f64>, seed: u64) {
    let mut rng = cda_core::seed::rng(seed ^ 0xb1a5);
    for g in ParamGroup::ALL {
        model.visit_group_mut(g, &mut |n, p| {
            if n.ends_with("bias") {
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        });
    }
}

/// Runs every objective's gradient check; returns (label, report) pairs.
pub fn all_gradient_checks(seed: u64) -> Vec<(&'static str, GradReport)> {
    let cfg = micro_config();
    let mut model = CdaModel::<f64>::init(&cfg, seed).unwrap();
    jitter_biases(&mut model, seed);
    let xs = random_inputs(4, 8, seed + 100);
    let labels = [0usize, 2, 1, 2];
    let focal = focal3();
    let mut out = Vec::new();

    for (label, branch) in [("L1 (transformer focal)", Branch::Vit), ("L2 (conv focal)", Branch::Cnn)] {
        let groups = [ParamGroup::Encoder(branch), ParamGroup::Classifier(branch)];
        let r = check_gradients(&mut model, &groups, &|m, g| {
            let batch: Vec<(&[f64], usize)> = xs.iter().map(|x| x.as_slice()).zip(labels).collect();
            stage1_loss(m, branch, &batch, &focal, g).unwrap()
        });
        out.push((label, r));
    }

    let target_feats: Vec<Vec<f64>> = xs[..2].iter().map(|x| model.encode(Branch::Vit, x)).collect();
    let src_v: Vec<(Vec<f64>, usize)> = xs[2..]
        .iter()
        .zip(&labels[2..])
        .map(|(x, &y)| (model.encode(Branch::Vit, x), y))
        .collect();
    let src_c: Vec<(Vec<f64>, usize)> = xs[2..]
        .iter()
        .zip(&labels[2..])
        .map(|(x, &y)| (model.encode(Branch::Cnn, x), y))
        .collect();
    let r = check_gradients(
        &mut model,
        &[ParamGroup::Classifier(Branch::Vit), ParamGroup::Classifier(Branch::Cnn)],
        &|m, g| {
            let batch = BoundaryBatch {
                target: &target_feats,
                source_vit: &src_v,
                source_cnn: &src_c,
            };
            stage2_boundary_loss(m, &batch, &focal, g).unwrap().total
        },
    );
    out.push(("L3 (boundary exploration)", r));

    let r = check_gradients(&mut model, &[ParamGroup::Encoder(Branch::Cnn)], &|m, g| {
        let t: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        stage2_consolidation_loss(m, Branch::Cnn, &t, g).unwrap()
    });
    out.push(("L4 (feature consolidation)", r));

    // Pseudo-labels computed once from the current model and then held fixed.
    let weak = random_inputs(4, 8, seed + 200);
    let strong = random_inputs(4, 8, seed + 300);
    let snapshot = model.snapshot_classifiers(true);
    for (label, dir) in [
        ("L_v2c (transformer teaches conv)", Direction::VitToCnn),
        ("L_c2v (conv teaches transformer)", Direction::CnnToVit),
    ] {
        let t = dir.teacher();
        let labels: Vec<Option<ProbabilityVector>> = weak
            .iter()
            .map(|x| {
                let f = model.encode(t, x);
                let q_star = ProbabilityVector::from_logits(&snapshot.classifier(t).logits(&f).unwrap()).unwrap();
                // soften so several samples clear a 0.34 threshold
                let q = ProbabilityVector::from_logits(&model.classifier(t).logits(&f).unwrap()).unwrap();
                Some(pseudo_label(&q_star, &q).unwrap())
            })
            .collect();
        let s = dir.student();
        let groups = [ParamGroup::Encoder(s), ParamGroup::Classifier(s)];
        let r = check_gradients(&mut model, &groups, &|m, g| {
            let inputs: Vec<&[f64]> = strong.iter().map(|x| x.as_slice()).collect();
            let terms = cross_branch_loss(m, dir, &inputs, &labels, 0.34, g).unwrap();
            assert!(terms.mask_count > 0);
            terms.loss
        });
        out.push((label, r));
    }
    out
}

use super::config::OptimizerConfig;
use crate::models::{CdaModel, ParamGroup};
use crate::nn::{Param, Real};

/// One momentum step on raw slices: `g = grad + wd*p; v = mu*v + g; p -= lr*v`.
pub fn sgd_update<R: Real>(value: &mut [R], grad: &[R], velocity: &mut [R], lr: f64, momentum: f64, wd: f64) {
    assert!(value.len() == grad.len() && grad.len() == velocity.len(), "slot shape mismatch");
    let (lr, mu, wd) = (R::c(lr), R::c(momentum), R::c(wd));
    for ((p, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

fn step_param<R: Real>(p: &mut Param<R>, lr: f64, cfg: &OptimizerConfig) {
    let Param {
        value, grad, velocity, ..
    } = p;
    sgd_update(value, grad, velocity, lr, cfg.momentum, cfg.weight_decay);
}

/// Updates exactly the listed groups from their accumulated gradients.
/// Every other group is left untouched, momentum slots included.
pub fn sgd_step<R: Real>(model: &mut CdaModel<R>, groups: &[ParamGroup], cfg: &OptimizerConfig) {
    for &g in groups {
        let lr = cfg.lr(model.config(), g);
        model.visit_group_mut(g, &mut |_, p| step_param(p, lr, cfg));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Branch, ModelConfig};

    #[test]
    fn one_step_arithmetic() {
        let (mut p, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(v[0], 0.5);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut p, mut v) = ([1.5f64, -2.0], [0.0, 0.0]);
        sgd_update(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn decay_only_step() {
        let (mut p, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.5);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut p, mut v) = ([0.0f64], [0.0]);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.5, 0.0);
        sgd_update(&mut p, &[1.0], &mut v, 1.0, 0.5, 0.0);
        assert_eq!(v[0], 1.5);
        assert_eq!(p[0], -2.5);
    }

    #[test]
    fn unlisted_groups_keep_their_fingerprints() {
        let cfg = ModelConfig {
            input_dims: [8, 8, 8],
            ..ModelConfig::default()
        };
        let mut m = CdaModel::<f32>::init(&small(cfg), 3).unwrap();
        for g in ParamGroup::ALL {
            m.visit_group_mut(g, &mut |_, p| p.grad.iter_mut().for_each(|x| *x = 0.1));
        }
        let before: Vec<String> = ParamGroup::ALL.iter().map(|&g| m.fingerprint(g)).collect();
        let updated = [ParamGroup::Classifier(Branch::Cnn)];
        sgd_step(&mut m, &updated, &OptimizerConfig::default());
        for (g, fp) in ParamGroup::ALL.iter().zip(&before) {
            assert_eq!(&m.fingerprint(*g) == fp, !updated.contains(g), "{g}");
        }
    }

    fn small(mut cfg: ModelConfig) -> ModelConfig {
        use crate::models::{CnnConfig, EncoderConfig, VitConfig};
        cfg.encoder_v = EncoderConfig::Vit(VitConfig {
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
        });
        cfg.encoder_c = EncoderConfig::Cnn(CnnConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 16,
        });
        cfg
    }

    #[test]
    fn learning_rate_follows_encoder_kind() {
        let base = ModelConfig::default();
        let opt = OptimizerConfig::default();
        assert_eq!(opt.lr(&base, ParamGroup::Encoder(Branch::Vit)), 1e-4);
        assert_eq!(opt.lr(&base, ParamGroup::Classifier(Branch::Cnn)), 5e-4);
        let both_cnn = ModelConfig {
            encoder_v: base.encoder_c.clone(),
            ..base.clone()
        };
        assert_eq!(opt.lr(&both_cnn, ParamGroup::Encoder(Branch::Vit)), 5e-4);
        let fixed = OptimizerConfig {
            lr_classifiers: Some(1e-3),
            ..opt
        };
        assert_eq!(fixed.lr(&base, ParamGroup::Classifier(Branch::Vit)), 1e-3);
    }
}

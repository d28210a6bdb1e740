use super::*;
use crate::datagen::{Dataset, Domain, DomainSpec};
use crate::losses::objectives::{stage1_loss, Grad};
use crate::losses::FocalParams;
use crate::models::{ClassifierConfig, CnnConfig, EncoderConfig, ParamGroup, VitConfig};

fn desk_model() -> ModelConfig {
    ModelConfig {
        input_dims: [8, 8, 8],
        encoder_v: EncoderConfig::Vit(VitConfig {
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
        }),
        encoder_c: EncoderConfig::Cnn(CnnConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 16,
        }),
        classifier: ClassifierConfig {
            hidden_dim: 8,
            num_classes: 3,
        },
    }
}

fn desk_data() -> Dataset {
    let src = DomainSpec {
        n_per_class: vec![3, 3, 2],
        dims: [8, 8, 8],
        ..DomainSpec::default_source()
    };
    let tgt = DomainSpec {
        n_per_class: vec![2, 2, 2],
        dims: [8, 8, 8],
        ..DomainSpec::default_target()
    };
    Dataset::synthesize(&src, &tgt).unwrap()
}

fn training_set(ds: &Dataset) -> TrainingSet<'_> {
    TrainingSet {
        source: ds
            .indices(Domain::Source)
            .into_iter()
            .map(|i| (&ds.samples[i].volume, ds.samples[i].label.unwrap()))
            .collect(),
        target: ds.indices(Domain::Target).into_iter().map(|i| &ds.samples[i].volume).collect(),
    }
}

fn plan(e1: usize, e2: usize, e3: usize) -> StagePlan {
    StagePlan {
        epochs_stage1: e1,
        epochs_stage2: e2,
        epochs_stage3: e3,
        ..StagePlan::default()
    }
}

fn fast_opt() -> OptimizerConfig {
    OptimizerConfig {
        lr_vit: 1e-2,
        lr_cnn: 1e-2,
        ..OptimizerConfig::default()
    }
}

const SEEDS: RunSeeds = RunSeeds { init: 11, train: 12 };

fn full_source_loss(model: &mut CdaModel<f32>, data: &TrainingSet<'_>, b: Branch) -> f64 {
    let inputs: Vec<(Vec<f32>, usize)> = data
        .source
        .iter()
        .map(|&(v, y)| (model.prepare_input(v).unwrap(), y))
        .collect();
    let pairs: Vec<(&[f32], usize)> = inputs.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    // the objective stage 1 minimizes: focal, gamma 2, inverse-frequency weights
    let focal = FocalParams::inverse_frequency(&[3, 3, 2], 2.0);
    stage1_loss(model, b, &pairs, &focal, Grad::ValueOnly).unwrap()
}

#[test]
fn stage1_lowers_both_source_losses_and_snapshots_the_result() {
    let ds = desk_data();
    let data = training_set(&ds);
    let mut state = TrainState::new(CdaModel::<f32>::init(&desk_model(), 1).unwrap());
    let before = Branch::BOTH.map(|b| full_source_loss(&mut state.model, &data, b));
    run_stage1(&mut state, &data.source, &plan(2, 0, 0), &OptimizerConfig::default(), 5).unwrap();
    let after = Branch::BOTH.map(|b| full_source_loss(&mut state.model, &data, b));
    assert!(after[0] < before[0] && after[1] < before[1], "{before:?} -> {after:?}");
    let snap = state.snapshot.as_ref().unwrap();
    assert!(snap.supervised());
    for b in Branch::BOTH {
        assert_eq!(snap.fingerprint(b), state.model.fingerprint(ParamGroup::Classifier(b)));
    }
    assert_eq!(state.log.len(), 2);
    assert_eq!(state.counters.stage1_steps, 4);
}

#[test]
fn stage1_rerun_is_identical() {
    let ds = desk_data();
    let data = training_set(&ds);
    let run = || {
        let mut s = TrainState::new(CdaModel::<f32>::init(&desk_model(), 1).unwrap());
        run_stage1(&mut s, &data.source, &plan(2, 0, 0), &fast_opt(), 5).unwrap();
        (s.log, s.model.fingerprint_all())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_domains_are_configuration_errors() {
    let ds = desk_data();
    let data = training_set(&ds);
    let mut state = TrainState::new(CdaModel::<f32>::init(&desk_model(), 1).unwrap());
    assert!(matches!(
        run_stage1(&mut state, &[], &plan(1, 1, 1), &fast_opt(), 0),
        Err(CdaError::Config(_))
    ));
    let no_target = TrainingSet {
        source: data.source.clone(),
        target: vec![],
    };
    assert!(matches!(
        run_stage2(&mut state, &no_target, &plan(1, 1, 1), &fast_opt(), 0, false),
        Err(CdaError::Config(_))
    ));
}

#[test]
fn stage2_freezes_the_exploring_encoder_and_moves_the_phases_as_intended() {
    let ds = desk_data();
    let data = training_set(&ds);
    let mut state = TrainState::new(CdaModel::<f32>::init(&desk_model(), 2).unwrap());
    run_stage1(&mut state, &data.source, &plan(1, 1, 0), &fast_opt(), 5).unwrap();
    let enc_v = state.model.fingerprint(ParamGroup::Encoder(Branch::Vit));
    let enc_c = state.model.fingerprint(ParamGroup::Encoder(Branch::Cnn));
    let audited = StagePlan {
        freeze_audit: FreezeAudit::Step,
        ..plan(1, 1, 0)
    };
    run_stage2(&mut state, &data, &audited, &fast_opt(), 5, false).unwrap();
    assert_eq!(state.model.fingerprint(ParamGroup::Encoder(Branch::Vit)), enc_v);
    assert_ne!(state.model.fingerprint(ParamGroup::Encoder(Branch::Cnn)), enc_c);
    let probe = state.stage2_probe.unwrap();
    assert_eq!(probe.explore_encoder, Branch::Vit);
    assert!(probe.explore_dl_end > probe.explore_dl_start, "{probe:?}");
    assert!(probe.mean_l4_delta < 0.0, "{probe:?}");
    assert_eq!(state.log.last().unwrap().frozen_verified, vec!["enc_v".to_string()]);
    assert_eq!(state.counters.stage2_boundary_steps, 3);
}

#[test]
fn reversed_stage2_freezes_the_conv_encoder() {
    let ds = desk_data();
    let data = training_set(&ds);
    let state: TrainState<f32> = run_variant(
        VariantId::Reversed,
        &desk_model(),
        &data,
        &plan(1, 1, 0),
        &fast_opt(),
        SEEDS,
    )
    .unwrap();
    let s2 = state.log.iter().find(|r| r.stage == 2).unwrap();
    assert_eq!(s2.frozen_verified, vec!["enc_c".to_string()]);
    assert_eq!(state.stage2_probe.unwrap().explore_encoder, Branch::Cnn);
}

#[test]
fn gate_at_upper_bound_passes_everything() {
    let ds = desk_data();
    let data = training_set(&ds);
    let p = StagePlan {
        tau: std::f64::consts::LN_2,
        ..plan(1, 1, 1)
    };
    let state: TrainState<f32> = run_variant(VariantId::Full, &desk_model(), &data, &p, &fast_opt(), SEEDS).unwrap();
    let s3 = state.log.iter().find(|r| r.stage == 3).unwrap();
    assert_eq!(s3.rates["gate_vit"], 1.0);
    assert_eq!(s3.rates["gate_cnn"], 1.0);
}

#[test]
fn vanishing_gate_after_classifier_updates_passes_nothing() {
    let ds = desk_data();
    let data = training_set(&ds);
    let p = StagePlan {
        tau: 1e-9,
        ..plan(1, 1, 1)
    };
    let state: TrainState<f32> = run_variant(VariantId::Full, &desk_model(), &data, &p, &fast_opt(), SEEDS).unwrap();
    let s3 = state.log.iter().find(|r| r.stage == 3).unwrap();
    assert_eq!(s3.rates["gate_vit"], 0.0);
    assert_eq!(s3.rates["gate_cnn"], 0.0);
    assert_eq!(s3.rates["mask_v2c"], 0.0);
}

#[test]
fn gate_function_accepts_tau_above_the_plan_bound() {
    let a = ProbabilityVector::new(vec![1.0, 0.0]).unwrap();
    let b = ProbabilityVector::new(vec![0.0, 1.0]).unwrap();
    assert_eq!(crate::losses::jsd(&a, &b).unwrap(), std::f64::consts::LN_2);
    assert!(consistency_gate(&a, &b, std::f64::consts::LN_2).unwrap().is_none());
    assert!(consistency_gate(&a, &b, std::f64::consts::LN_2 + 1e-9).unwrap().is_some());
    assert!(consistency_gate(&a, &a, 1e-9).unwrap().is_some());
}

#[test]
fn variant_stage_counters() {
    let ds = desk_data();
    let data = training_set(&ds);
    let p = plan(1, 1, 1);
    let s1: TrainState<f32> = run_variant(VariantId::S1, &desk_model(), &data, &p, &fast_opt(), SEEDS).unwrap();
    let c = s1.counters;
    assert!(c.stage1_steps > 0);
    assert_eq!(
        (c.stage2_boundary_steps, c.stage2_consolidation_steps, c.stage3_steps),
        (0, 0, 0)
    );

    let v2c: TrainState<f32> = run_variant(VariantId::V2c, &desk_model(), &data, &p, &fast_opt(), SEEDS).unwrap();
    assert!(v2c.counters.v2c_evaluations > 0);
    assert_eq!(v2c.counters.c2v_evaluations, 0);
    let s3 = v2c.log.iter().find(|r| r.stage == 3).unwrap();
    assert!(s3.frozen_verified.contains(&"enc_v".to_string()));

    let s23: TrainState<f32> = run_variant(VariantId::S23, &desk_model(), &data, &p, &fast_opt(), SEEDS).unwrap();
    assert_eq!(s23.counters.stage1_steps, 0);
    assert!(!s23.snapshot.as_ref().unwrap().supervised());
    assert!(s23.log[0].note.as_deref().unwrap().contains("no supervised snapshot"));
}

#[test]
fn composed_stages_equal_the_variant_run() {
    let ds = desk_data();
    let data = training_set(&ds);
    let p = plan(1, 1, 1);
    let opt = fast_opt();
    let whole: TrainState<f32> = run_variant(VariantId::C2v, &desk_model(), &data, &p, &opt, SEEDS).unwrap();

    let mut shared = TrainState::new(CdaModel::<f32>::init(&desk_model(), SEEDS.init).unwrap());
    run_stage1(&mut shared, &data.source, &p, &opt, SEEDS.train).unwrap();
    run_stage2(&mut shared, &data, &p, &opt, SEEDS.train, false).unwrap();
    let mut branch = shared.clone();
    run_stage3(
        &mut branch,
        &data.target,
        &p,
        &opt,
        SEEDS.train,
        Directions { v2c: false, c2v: true },
    )
    .unwrap();
    assert_eq!(branch.model.fingerprint_all(), whole.model.fingerprint_all());
    assert_eq!(branch.log, whole.log);
}

#[test]
fn homogeneous_variants_duplicate_one_encoder() {
    let base = desk_model();
    let cc = VariantId::CnnCnn.model_config(&base);
    assert_eq!(cc.encoder_v, base.encoder_c);
    let vv = VariantId::VitVit.model_config(&base);
    assert_eq!(vv.encoder_c, base.encoder_v);
    let ds = desk_data();
    let data = training_set(&ds);
    let s: TrainState<f32> = run_variant(VariantId::CnnCnn, &base, &data, &plan(1, 1, 1), &fast_opt(), SEEDS).unwrap();
    assert!(s.counters.stage3_steps > 0);
}

#[test]
fn freeze_guard_reports_a_changed_group() {
    let mut m = CdaModel::<f32>::init(&desk_model(), 4).unwrap();
    let guard = FreezeGuard::capture(&m, &[ParamGroup::Classifier(Branch::Vit)]);
    guard.verify(&m, "noop").unwrap();
    m.visit_group_mut(ParamGroup::Classifier(Branch::Vit), &mut |_, p| p.value[0] += 1.0);
    let err = guard.verify(&m, "a test step").unwrap_err();
    assert!(matches!(err, CdaError::Invariant(ref s) if s.contains("cls_v")), "{err}");
}

#[test]
fn predict_breaks_ties_low() {
    let ds = desk_data();
    let mut m = CdaModel::<f32>::init(&desk_model(), 4).unwrap();
    m.classifier_mut(Branch::Cnn).zero_all();
    let (c, p) = predict(&m, &ds.samples[0].volume, Branch::Cnn).unwrap();
    assert_eq!(c, 0);
    assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
}

#[test]
fn log_lines_round_trip() {
    let ds = desk_data();
    let data = training_set(&ds);
    let s: TrainState<f32> = run_variant(VariantId::Full, &desk_model(), &data, &plan(1, 1, 1), &fast_opt(), SEEDS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    s.write_log(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, s.log);
}

#[test]
fn plan_and_optimizer_validation() {
    let bad_tau = StagePlan {
        tau: std::f64::consts::LN_2 + 1e-6,
        ..StagePlan::default()
    };
    assert!(matches!(bad_tau.validate(3), Err(CdaError::Config(_))));
    let bad_theta = StagePlan {
        theta1: 1.0 / 3.0,
        ..StagePlan::default()
    };
    assert!(matches!(bad_theta.validate(3), Err(CdaError::Config(_))));
    StagePlan::default().validate(3).unwrap();
    let bad_batch = OptimizerConfig {
        batch_size: 1,
        ..OptimizerConfig::default()
    };
    assert!(matches!(bad_batch.validate(), Err(CdaError::Config(_))));
    let bad_lr = OptimizerConfig {
        lr_cnn: 0.0,
        ..OptimizerConfig::default()
    };
    assert!(matches!(bad_lr.validate(), Err(CdaError::Config(_))));
}

#[test]
fn variant_ids_parse_and_list_valid_ids_on_error() {
    for v in VariantId::ALL {
        assert_eq!(v.as_str().parse::<VariantId>().unwrap(), v);
    }
    let err = "bogus".parse::<VariantId>().unwrap_err().to_string();
    assert!(err.contains("full") && err.contains("vit_vit"), "{err}");
}

//! Experiment configuration and the end-to-end pipelines behind the command
//! line: dataset generation, single training runs, repeated stratified
//! cross-validation and report tables.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{CvConfig, DataConfig, ExperimentConfig, SeedConfig};

use crate::datagen::{generate_dataset, Dataset, DatasetManifest, Domain};
use crate::error::{CdaError, Result};
use crate::eval::{evaluate_fold, reports_csv, stratified_kfold, FoldReport, FoldSplit, RepeatReport, RunReport};
use crate::models::{checkpoint, Branch};
use crate::seed::{derive, stream};
use crate::trainer::{predict, run_variant_with, RunSeeds, TrainState, TrainingSet, VariantId};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const LOG_FILE: &str = "log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const SPLIT_FILE: &str = "split.json";
/// Default output root when no directory is given.
pub const RUNS_DIR_ENV: &str = "CDA_RUNS_DIR";

pub fn default_runs_dir() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CdaError::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CdaError::io(path, e))
}

/// Writes the configured benchmark (with `seeds.data`) under `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    let (s, t) = cfg.data.seeded_specs(cfg.seeds.data);
    generate_dataset(&s, &t, out)
}

/// Loads the manifest named by the config, or synthesizes the benchmark.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match &cfg.data.manifest {
        Some(dir) => Dataset::load(dir)?,
        None => {
            let (s, t) = cfg.data.seeded_specs(cfg.seeds.data);
            Dataset::synthesize(&s, &t)?
        }
    };
    if ds.manifest.dims != cfg.model.input_dims {
        return Err(CdaError::Data(format!(
            "data volumes are {:?} but the model expects {:?}",
            ds.manifest.dims, cfg.model.input_dims
        )));
    }
    if ds.manifest.num_classes != cfg.model.classifier.num_classes {
        return Err(CdaError::Data(format!(
            "data has {} classes but the model predicts {}",
            ds.manifest.num_classes, cfg.model.classifier.num_classes
        )));
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Option<usize>,
    pub branch: Branch,
    pub class: usize,
    pub probs: Vec<f64>,
    /// The other branch's class, for diagnostics.
    pub other_class: usize,
}

fn predict_all(state: &TrainState<f32>, ds: &Dataset, idx: &[usize], branch: Branch) -> Result<Vec<Prediction>> {
    idx.iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let (class, p) = predict(&state.model, &s.volume, branch)?;
            let (other_class, _) = predict(&state.model, &s.volume, branch.other())?;
            Ok(Prediction {
                id: s.id.clone(),
                label: s.label,
                branch,
                class,
                probs: p.as_slice().to_vec(),
                other_class,
            })
        })
        .collect()
}

fn fold_metrics(preds: &[Prediction], k: usize, fold: usize) -> Result<FoldReport> {
    let labels = preds
        .iter()
        .map(|p| {
            p.label
                .ok_or_else(|| CdaError::Data(format!("target sample {} has no ground truth", p.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    Ok(FoldReport {
        fold,
        n_test: preds.len(),
        metrics: evaluate_fold(&classes, &scores, &labels, k)?,
    })
}

fn seed_map(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".to_string(), cfg.seeds.data),
        ("init".to_string(), cfg.seeds.init),
        ("cv".to_string(), cfg.seeds.cv),
    ])
}

/// Seeds of one training job; `job` distinguishes cross-validation cells.
pub fn job_seeds(init: u64, job: &[u64]) -> RunSeeds {
    let key = |tag: u64| {
        let mut w = vec![init, tag];
        w.extend_from_slice(job);
        derive(&w)
    };
    RunSeeds {
        init: key(stream::INIT),
        train: key(stream::TRAIN),
    }
}

fn training_set<'a>(ds: &'a Dataset, target_idx: &[usize]) -> Result<TrainingSet<'a>> {
    let source = ds
        .indices(Domain::Source)
        .into_iter()
        .map(|i| {
            let s = &ds.samples[i];
            s.label
                .map(|y| (&s.volume, y))
                .ok_or_else(|| CdaError::Data(format!("source sample {} has no label", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        source,
        target: target_idx.iter().map(|&i| &ds.samples[i].volume).collect(),
    })
}

/// Trains one variant on all source samples and all target samples
/// (unlabeled) and evaluates it on the target ground truth. Writes the
/// resolved config, per-stage checkpoints, the epoch log, predictions and
/// the report into `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    mkdir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let target = ds.indices(Domain::Target);
    let data = training_set(&ds, &target)?;
    let seeds = job_seeds(cfg.seeds.init, &[]);
    let state = run_variant_with::<f32>(cfg.variant, &cfg.model, &data, &cfg.plan, &cfg.opt, seeds, &mut |stage, st| {
        checkpoint::save(&st.model, &out.join("checkpoints").join(format!("stage{stage}"))).map(|_| ())
    })?;
    state.write_log(&out.join(LOG_FILE))?;
    let preds = predict_all(&state, &ds, &target, cfg.inference(cfg.variant))?;
    write_json(&out.join(PREDICTIONS_FILE), &preds)?;
    let k = cfg.model.classifier.num_classes;
    let report = RunReport::new(
        cfg.variant.as_str(),
        k,
        seed_map(cfg),
        vec![RepeatReport {
            repeat: 0,
            seed: cfg.seeds.cv,
            folds: vec![fold_metrics(&preds, k, 0)?],
        }],
    );
    report.check()?;
    report.save(&out.join(REPORT_FILE))?;
    Ok(report)
}

/// Target splits of every repeat; repeat `r` uses split seed `derive([cv, r])`.
pub fn target_splits(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Vec<FoldSplit>>> {
    let k = ds.manifest.num_classes;
    let mut by_class = vec![Vec::new(); k];
    for i in ds.indices(Domain::Target) {
        let s = &ds.samples[i];
        let y = s
            .label
            .ok_or_else(|| CdaError::Data(format!("target sample {} has no ground truth", s.id)))?;
        by_class[y].push(s.id.clone());
    }
    (0..cfg.cv.repeats)
        .map(|r| stratified_kfold(&by_class, cfg.cv.k, derive(&[cfg.seeds.cv, r as u64])))
        .collect()
}

struct Job {
    variant: VariantId,
    repeat: usize,
    split: FoldSplit,
}

/// Result of a cross-validation run: the main variant's report (with
/// p-values against each baseline) and every baseline's report.
#[derive(Debug, Clone)]
pub struct CrossvalOutcome {
    pub main: RunReport,
    pub baselines: Vec<RunReport>,
}

/// Repeated stratified k-fold cross-validation over the target domain. Each
/// (variant, repeat, fold) cell trains on all source samples plus the
/// unlabeled training folds and is evaluated on the held-out fold. Cells run
/// concurrently; reports do not depend on completion order.
pub fn crossval(cfg: &ExperimentConfig, out: &Path) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    mkdir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let splits = target_splits(cfg, &ds)?;
    let by_id: BTreeMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();

    let mut variants = vec![cfg.variant];
    for b in &cfg.cv.baselines {
        if !variants.contains(b) {
            variants.push(*b);
        }
    }
    let jobs: Vec<Job> = variants
        .iter()
        .flat_map(|&variant| {
            splits.iter().enumerate().flat_map(move |(repeat, folds)| {
                folds.iter().map(move |split| Job {
                    variant,
                    repeat,
                    split: split.clone(),
                })
            })
        })
        .collect();

    let k = cfg.model.classifier.num_classes;
    let results: Vec<FoldReport> = jobs
        .par_iter()
        .map(|job| {
            let dir = out
                .join(job.variant.as_str())
                .join(format!("repeat{}_fold{}", job.repeat, job.split.fold_index));
            mkdir(&dir)?;
            write_json(&dir.join(SPLIT_FILE), &job.split)?;
            let lookup = |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
            let (train_idx, test_idx) = (lookup(&job.split.train_ids), lookup(&job.split.test_ids));
            let data = training_set(&ds, &train_idx)?;
            let seeds = job_seeds(cfg.seeds.init, &[job.repeat as u64, job.split.fold_index as u64]);
            let state =
                run_variant_with::<f32>(job.variant, &cfg.model, &data, &cfg.plan, &cfg.opt, seeds, &mut |_, _| Ok(()))?;
            state.write_log(&dir.join(LOG_FILE))?;
            let preds = predict_all(&state, &ds, &test_idx, cfg.inference(job.variant))?;
            write_json(&dir.join(PREDICTIONS_FILE), &preds)?;
            fold_metrics(&preds, k, job.split.fold_index)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for &variant in &variants {
        let repeats = splits
            .iter()
            .enumerate()
            .map(|(repeat, folds)| RepeatReport {
                repeat,
                seed: folds[0].repeat_seed,
                folds: jobs
                    .iter()
                    .zip(&results)
                    .filter(|(j, _)| j.variant == variant && j.repeat == repeat)
                    .map(|(_, f)| f.clone())
                    .collect(),
            })
            .collect();
        let report = RunReport::new(variant.as_str(), k, seed_map(cfg), repeats);
        report.check()?;
        reports.push(report);
    }
    let mut main = reports.remove(0);
    for b in &reports {
        main.compare_with(b)?;
    }
    for r in &reports {
        r.save(&out.join(r.variant.as_str()).join(REPORT_FILE))?;
    }
    main.save(&out.join(cfg.variant.as_str()).join(REPORT_FILE))?;
    main.save(&out.join(REPORT_FILE))?;
    let mut all = vec![main.clone()];
    all.extend(reports.iter().cloned());
    fs::write(out.join(REPORT_CSV), reports_csv(&all)).map_err(|e| CdaError::io(out.join(REPORT_CSV), e))?;
    Ok(CrossvalOutcome {
        main,
        baselines: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub folds: usize,
    pub aggregate: BTreeMap<String, crate::eval::MeanStd>,
    /// Metric -> p-value against the table's baseline.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub p_values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub std_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub rows: Vec<SummaryRow>,
}

/// Finds `report.json` in each directory and builds the summary table, with
/// paired t-tests against `baseline` when given.
pub fn report(runs: &[PathBuf], baseline: Option<&str>) -> Result<(SummaryTable, String)> {
    if runs.is_empty() {
        return Err(CdaError::InvalidInput("no run directories given".into()));
    }
    let reports = runs
        .iter()
        .map(|d| RunReport::load(&d.join(REPORT_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let base = match baseline {
        None => None,
        Some(b) => Some(reports.iter().find(|r| r.variant == b).ok_or_else(|| {
            CdaError::InvalidInput(format!("baseline '{b}' is not among the loaded reports"))
        })?),
    };
    let mut rows = Vec::new();
    let mut p_acc = BTreeMap::new();
    for r in &reports {
        let mut p_values = BTreeMap::new();
        if let Some(b) = base.filter(|b| b.variant != r.variant) {
            let mut cmp = r.clone();
            cmp.p_values.clear();
            cmp.compare_with(b)?;
            p_values = cmp.p_values.remove(&b.variant).unwrap_or_default();
            if let Some(p) = p_values.get("acc") {
                p_acc.insert(r.variant.clone(), *p);
            }
        }
        rows.push(SummaryRow {
            variant: r.variant.clone(),
            folds: r.folds().count(),
            aggregate: r.aggregate.clone(),
            p_values,
        });
    }
    let mut csv = reports_csv(&reports);
    if let Some(b) = base {
        csv = csv
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let cell = if i == 0 {
                    format!("p_acc_vs_{}", b.variant)
                } else {
                    let variant = line.split(',').next().unwrap_or_default();
                    p_acc.get(variant).map(|p| p.to_string()).unwrap_or_default()
                };
                format!("{line},{cell}\n")
            })
            .collect();
    }
    Ok((
        SummaryTable {
            std_kind: "population".into(),
            baseline: baseline.map(str::to_string),
            rows,
        },
        csv,
    ))
}

pub fn write_report(runs: &[PathBuf], baseline: Option<&str>, json_out: &Path, csv_out: Option<&Path>) -> Result<SummaryTable> {
    let (table, csv) = report(runs, baseline)?;
    write_json(json_out, &table)?;
    if let Some(p) = csv_out {
        fs::write(p, csv).map_err(|e| CdaError::io(p, e))?;
    }
    Ok(table)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, binary_metrics, confusion_matrix, one_vs_rest_metrics, ClassMetrics};
use super::stats::paired_t_test;
use crate::error::{CdaError, Result};

/// Metrics of one test fold. AUC, specificity and F1 exist only for binary
/// tasks (class 1 positive); for more classes `sen` is the macro mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub acc: f64,
    pub sen: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl FoldMetrics {
    /// Named scalar values, per-class ones as `acc_k` / `sen_k`.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        };
        push("auc", self.auc);
        push("acc", Some(self.acc));
        push("sen", Some(self.sen));
        push("spe", self.spe);
        push("f1", self.f1);
        for (k, c) in self.per_class.iter().enumerate() {
            out.push((format!("acc_{k}"), c.acc));
            out.push((format!("sen_{k}"), c.sen));
        }
        out
    }
}

/// `scores[i]` is the predicted probability vector of sample `i`.
pub fn evaluate_fold(preds: &[usize], scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<FoldMetrics> {
    if scores.len() != preds.len() {
        return Err(CdaError::InvalidInput(format!(
            "{} score vectors for {} predictions",
            scores.len(),
            preds.len()
        )));
    }
    let cm = confusion_matrix(preds, labels, k)?;
    let ovr = one_vs_rest_metrics(&cm)?;
    let mut flags = ovr.flags.clone();
    if k != 2 {
        return Ok(FoldMetrics {
            auc: None,
            acc: ovr.acc,
            sen: ovr.sen,
            spe: None,
            f1: None,
            per_class: ovr.per_class,
            flags,
        });
    }
    let bin = binary_metrics(&cm)?;
    flags.extend(bin.flags.iter().cloned());
    let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
    let pos_scores: Vec<f64> = scores.iter().map(|s| s.get(1).copied().unwrap_or(f64::NAN)).collect();
    let auc = match auc(&pos_scores, &positive) {
        Ok(a) => Some(a),
        Err(CdaError::UndefinedMetric(_)) => {
            flags.push("auc_single_class".into());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(FoldMetrics {
        auc,
        acc: bin.acc,
        sen: bin.sen,
        spe: Some(bin.spe),
        f1: Some(bin.f1),
        per_class: ovr.per_class,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Mean and population standard deviation of every metric present in any fold.
pub fn aggregate<'a>(folds: impl IntoIterator<Item = &'a FoldMetrics>) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in folds {
        for (name, v) in f.named() {
            values.entry(name).or_default().push(v);
        }
    }
    values.into_iter().filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_test: usize,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    /// Split seed of this repeat.
    pub seed: u64,
    pub folds: Vec<FoldReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub num_classes: usize,
    pub seeds: BTreeMap<String, u64>,
    /// How `aggregate` spreads are computed.
    pub std_kind: String,
    pub repeats: Vec<RepeatReport>,
    pub aggregate: BTreeMap<String, MeanStd>,
    /// Baseline variant -> metric -> two-sided paired t-test p-value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub p_values: BTreeMap<String, BTreeMap<String, f64>>,
}

impl RunReport {
    pub fn new(variant: &str, num_classes: usize, seeds: BTreeMap<String, u64>, repeats: Vec<RepeatReport>) -> Self {
        let aggregate = aggregate(repeats.iter().flat_map(|r| r.folds.iter().map(|f| &f.metrics)));
        RunReport {
            variant: variant.to_string(),
            num_classes,
            seeds,
            std_kind: "population".into(),
            repeats,
            aggregate,
            p_values: BTreeMap::new(),
        }
    }

    pub fn folds(&self) -> impl Iterator<Item = (&RepeatReport, &FoldReport)> {
        self.repeats.iter().flat_map(|r| r.folds.iter().map(move |f| (r, f)))
    }

    /// Values of `metric` keyed by (split seed, fold).
    pub fn series(&self, metric: &str) -> BTreeMap<(u64, usize), f64> {
        self.folds()
            .filter_map(|(r, f)| {
                f.metrics
                    .named()
                    .into_iter()
                    .find(|(n, _)| n == metric)
                    .map(|(_, v)| ((r.seed, f.fold), v))
            })
            .collect()
    }

    /// Paired t-tests against `baseline` over folds sharing a split seed and index.
    pub fn compare_with(&mut self, baseline: &RunReport) -> Result<()> {
        let mut out = BTreeMap::new();
        for metric in self.aggregate.keys() {
            let (mine, theirs) = (self.series(metric), baseline.series(metric));
            let keys: Vec<_> = mine.keys().filter(|k| theirs.contains_key(k)).collect();
            if keys.len() < 2 {
                continue;
            }
            let a: Vec<f64> = keys.iter().map(|k| mine[k]).collect();
            let b: Vec<f64> = keys.iter().map(|k| theirs[k]).collect();
            out.insert(metric.clone(), paired_t_test(&a, &b)?.p_value);
        }
        if out.is_empty() {
            return Err(CdaError::InvalidInput(format!(
                "{} and {} share fewer than two (seed, fold) pairs",
                self.variant, baseline.variant
            )));
        }
        self.p_values.insert(baseline.variant.clone(), out);
        Ok(())
    }

    /// Bounds on every value and the macro-sensitivity identity.
    pub fn check(&self) -> Result<()> {
        for (r, f) in self.folds() {
            let m = &f.metrics;
            let at = || format!("{} repeat {} fold {}", self.variant, r.repeat, f.fold);
            if let Some((n, v)) = m.named().into_iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
                return Err(CdaError::Invariant(format!("{n} = {v} outside [0, 1] at {}", at())));
            }
            if self.num_classes > 2 {
                let mean = m.per_class.iter().map(|c| c.sen).sum::<f64>() / m.per_class.len() as f64;
                if (mean - m.sen).abs() > 1e-12 {
                    return Err(CdaError::Invariant(format!(
                        "macro sensitivity {} != mean class sensitivity {mean} at {}",
                        m.sen,
                        at()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self).map_err(|e| CdaError::json("report", e))?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| CdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CdaError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CdaError::json(path, e))
    }
}

/// One row per (variant, repeat, fold); absent metrics are empty cells.
pub fn reports_csv(reports: &[RunReport]) -> String {
    let k = reports.iter().map(|r| r.num_classes).max().unwrap_or(0);
    let mut cols: Vec<String> = ["auc", "acc", "sen", "spe", "f1"].iter().map(|s| s.to_string()).collect();
    for c in 0..k {
        cols.push(format!("acc_{c}"));
        cols.push(format!("sen_{c}"));
    }
    let mut out = format!("variant,repeat,seed,fold,n_test,{}\n", cols.join(","));
    for rep in reports {
        for (r, f) in rep.folds() {
            let named: BTreeMap<String, f64> = f.metrics.named().into_iter().collect();
            let _ = write!(out, "{},{},{},{},{}", rep.variant, r.repeat, r.seed, f.fold, f.n_test);
            for c in &cols {
                out.push(',');
                if let Some(v) = named.get(c) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(acc: f64) -> FoldMetrics {
        FoldMetrics {
            auc: None,
            acc,
            sen: acc,
            spe: None,
            f1: None,
            per_class: vec![ClassMetrics { acc, sen: acc }; 3],
            flags: vec![],
        }
    }

    fn report(variant: &str, accs: &[f64]) -> RunReport {
        let folds = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| FoldReport {
                fold: i,
                n_test: 10,
                metrics: fold(a),
            })
            .collect();
        RunReport::new(
            variant,
            3,
            BTreeMap::new(),
            vec![RepeatReport {
                repeat: 0,
                seed: 7,
                folds,
            }],
        )
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let a = aggregate([&fold(0.6), &fold(0.8)]);
        assert!((a["acc"].mean - 0.7).abs() < 1e-15);
        assert!((a["acc"].std - 0.1).abs() < 1e-15);
        let single = aggregate([&fold(0.6)]);
        assert_eq!(single["acc"].std, 0.0);
        assert!(!a.contains_key("auc"));
    }

    #[test]
    fn aggregate_ignores_fold_order() {
        let fs = [fold(0.1), fold(0.5), fold(0.9), fold(0.3)];
        let fwd = aggregate(fs.iter());
        let rev = aggregate(fs.iter().rev());
        for (k, v) in &fwd {
            assert!((v.mean - rev[k].mean).abs() < 1e-15 && (v.std - rev[k].std).abs() < 1e-15);
        }
    }

    #[test]
    fn binary_fold_has_all_five_metrics() {
        let preds = [1, 1, 0, 0];
        let labels = [1, 0, 0, 1];
        let scores = vec![vec![0.2, 0.8], vec![0.4, 0.6], vec![0.7, 0.3], vec![0.9, 0.1]];
        let m = evaluate_fold(&preds, &scores, &labels, 2).unwrap();
        assert_eq!(m.auc, Some(0.5));
        assert_eq!((m.acc, m.sen, m.spe, m.f1), (0.5, 0.5, Some(0.5), Some(0.5)));
    }

    #[test]
    fn three_class_fold_omits_binary_only_metrics() {
        let scores = vec![vec![1.0 / 3.0; 3]; 3];
        let m = evaluate_fold(&[0, 1, 2], &scores, &[0, 1, 1], 3).unwrap();
        assert!(m.auc.is_none() && m.spe.is_none() && m.f1.is_none());
        assert_eq!(m.per_class.len(), 3);
    }

    #[test]
    fn p_values_pair_by_seed_and_fold() {
        let mut a = report("full", &[0.7, 0.8, 0.9, 0.6, 0.75]);
        let b = report("s1", &[0.6, 0.7, 0.8, 0.5, 0.65]);
        a.compare_with(&b).unwrap();
        assert!(a.p_values["s1"]["acc"] < 1e-12);
        let mut c = report("x", &[0.5]);
        assert!(c.compare_with(&b).is_err());
    }

    #[test]
    fn csv_has_one_row_per_fold() {
        let csv = reports_csv(&[report("a", &[0.5, 0.6]), report("b", &[0.7])]);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("variant,repeat,seed,fold,n_test,auc,acc,sen,spe,f1,acc_0,sen_0"));
        assert!(csv.lines().nth(1).unwrap().starts_with("a,0,7,0,10,,0.5,0.5,,"));
    }

    #[test]
    fn json_round_trip_and_check() {
        let r = report("full", &[0.25, 0.5]);
        r.check().unwrap();
        let back: RunReport = serde_json::from_slice(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.repeats[0].folds[0].metrics.sen = 0.9;
        assert!(bad.check().is_err());
    }
}

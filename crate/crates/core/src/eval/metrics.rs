use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    /// Binary matrix from raw counts, class 1 positive.
    pub fn binary(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(CdaError::InvalidInput(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(CdaError::UndefinedMetric("empty prediction set".into()));
    }
    let mut counts = vec![vec![0; k]; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(CdaError::InvalidInput(format!("class pair ({y}, {p}) outside [0, {k})")));
        }
        counts[y][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// `num / den`, or 0 with `name` recorded when the denominator vanishes.
fn ratio(num: usize, den: usize, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("{name}_zero_denominator"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    /// Metrics reported as 0 because their denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Class 1 is positive.
pub fn binary_metrics(cm: &ConfusionMatrix) -> Result<BinaryMetrics> {
    if cm.num_classes() != 2 {
        return Err(CdaError::InvalidInput(format!(
            "binary metrics need a 2x2 matrix, got {0}x{0}",
            cm.num_classes()
        )));
    }
    if cm.total() == 0 {
        return Err(CdaError::UndefinedMetric("empty confusion matrix".into()));
    }
    let (tn, fp, fn_, tp) = (cm.counts[0][0], cm.counts[0][1], cm.counts[1][0], cm.counts[1][1]);
    let mut flags = Vec::new();
    Ok(BinaryMetrics {
        acc: cm.trace() as f64 / cm.total() as f64,
        sen: ratio(tp, tp + fn_, "sen", &mut flags),
        spe: ratio(tn, tn + fp, "spe", &mut flags),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, "f1", &mut flags),
        flags,
    })
}

/// Fraction of (positive, negative) pairs with the positive scored higher,
/// ties counted half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(CdaError::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CdaError::InvalidInput("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CdaError::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank2_pos = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank2_pos += mid2 * order[i..=j].iter().filter(|&&o| positive[o]).count() as u128;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Accuracy of the k-vs-rest binary decision.
    pub acc: f64,
    /// Recall of class k.
    pub sen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsRest {
    /// Multi-class accuracy.
    pub acc: f64,
    /// Macro mean of per-class sensitivities.
    pub sen: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

pub fn one_vs_rest_metrics(cm: &ConfusionMatrix) -> Result<OneVsRest> {
    let total = cm.total();
    if total == 0 {
        return Err(CdaError::UndefinedMetric("empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let mut flags = Vec::new();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let row: usize = cm.counts[c].iter().sum();
            let col: usize = (0..k).map(|r| cm.counts[r][c]).sum();
            let tp = cm.counts[c][c];
            let tn = total + tp - row - col;
            ClassMetrics {
                acc: (tp + tn) as f64 / total as f64,
                sen: ratio(tp, row, &format!("sen_{c}"), &mut flags),
            }
        })
        .collect();
    Ok(OneVsRest {
        acc: cm.trace() as f64 / total as f64,
        sen: per_class.iter().map(|m| m.sen).sum::<f64>() / k as f64,
        per_class,
        flags,
    })
}

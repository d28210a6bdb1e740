//! Scalar objectives. Natural logarithms throughout; probabilities are
//! clamped at [`PROB_FLOOR`] before any logarithm.
//!
//! Each loss has a generic kernel returning its value together with the
//! gradient with respect to its probability arguments; the public
//! [`ProbabilityVector`] functions are thin wrappers over the `f64` kernels.

pub mod objectives;

use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::nn::Real;

pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

/// A point on the probability simplex with at least two classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(CdaError::InvalidInput(format!(
                "probability vectors need K >= 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CdaError::InvalidInput(format!("negative or non-finite probability in {values:?}")));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(CdaError::InvalidInput(format!("probabilities sum to {s}, not 1")));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn from_logits<R: Real>(logits: &[R]) -> Result<Self> {
        let p = crate::models::softmax(logits);
        Self::new(p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn uniform(k: usize) -> Self {
        ProbabilityVector(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest component; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn to_real<R: Real>(&self) -> Vec<R> {
        self.0.iter().map(|&v| R::c(v)).collect()
    }
}

pub fn argmax<R: PartialOrd + Copy>(v: &[R]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn same_len(a: &ProbabilityVector, b: &ProbabilityVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(CdaError::InvalidInput(format!(
            "probability vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Per-class weights.
    pub alpha: Vec<f64>,
}

impl FocalParams {
    /// `gamma = 0`, unit weights: plain cross-entropy.
    pub fn cross_entropy(k: usize) -> Self {
        FocalParams {
            gamma: 0.0,
            alpha: vec![1.0; k],
        }
    }

    /// Weights proportional to inverse class frequency, normalized to mean 1.
    pub fn inverse_frequency(counts: &[usize], gamma: f64) -> Self {
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        FocalParams {
            gamma,
            alpha: inv.iter().map(|w| w / mean).collect(),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(CdaError::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha.len() != k || self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(CdaError::Config(format!(
                "focal alpha needs {k} positive weights, got {:?}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `-alpha (1 - p_y)^gamma ln p_y` and its gradient with respect to `p`.
pub fn focal_kernel<R: Real>(p: &[R], y: usize, gamma: f64, alpha: f64) -> (R, Vec<R>) {
    let floor = R::c(PROB_FLOOR);
    let py = p[y];
    let clamped = py.max(floor);
    let ln = clamped.ln();
    let q = R::one() - py;
    let (g, a) = (R::c(gamma), R::c(alpha));
    let modulator = if gamma == 0.0 { R::one() } else { q.max(R::zero()).powf(g) };
    let value = -a * modulator * ln;
    let mut grad = vec![R::zero(); p.len()];
    // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
    let dmod = if gamma == 0.0 || q <= R::zero() {
        R::zero()
    } else {
        g * q.powf(g - R::one()) * ln
    };
    let dln = if py > floor { modulator / py } else { R::zero() };
    grad[y] = a * (dmod - dln);
    (value, grad)
}

/// Mean absolute difference `(1/K) sum |a_k - b_k|` and its subgradients.
pub fn discrepancy_kernel<R: Real>(a: &[R], b: &[R]) -> (R, Vec<R>, Vec<R>) {
    let k = R::c(a.len() as f64);
    let mut value = R::zero();
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        value += d.abs();
        let s = if d > R::zero() {
            R::one()
        } else if d < R::zero() {
            -R::one()
        } else {
            R::zero()
        };
        da.push(s / k);
        db.push(-s / k);
    }
    (value / k, da, db)
}

/// `-sum_k t_k ln p_k` and its gradient with respect to `p`.
pub fn soft_ce_kernel<R: Real>(p: &[R], t: &[R]) -> (R, Vec<R>) {
    let floor = R::c(PROB_FLOOR);
    let mut value = R::zero();
    let mut grad = Vec::with_capacity(p.len());
    for (&pk, &tk) in p.iter().zip(t) {
        value -= tk * pk.max(floor).ln();
        grad.push(if pk > floor { -tk / pk } else { R::zero() });
    }
    (value, grad)
}

pub fn focal_loss(p: &ProbabilityVector, y: usize, fp: &FocalParams) -> Result<f64> {
    if y >= p.len() {
        return Err(CdaError::InvalidInput(format!("label {y} outside [0, {})", p.len())));
    }
    let alpha = *fp
        .alpha
        .get(y)
        .ok_or_else(|| CdaError::InvalidInput(format!("no focal weight for class {y}")))?;
    Ok(focal_kernel(p.as_slice(), y, fp.gamma, alpha).0)
}

pub fn discrepancy(a: &ProbabilityVector, b: &ProbabilityVector) -> Result<f64> {
    same_len(a, b)?;
    Ok(discrepancy_kernel(a.as_slice(), b.as_slice()).0)
}

/// `KL(p || q)` with both arguments clamped at the probability floor.
pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    same_len(p, q)?;
    Ok(kl_raw(p.as_slice(), q.as_slice()))
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk.max(PROB_FLOOR).ln() - qk.max(PROB_FLOOR).ln()))
        .sum()
}

/// Jensen-Shannon divergence through the mixture `M = (p1 + p2) / 2`.
pub fn jsd(p1: &ProbabilityVector, p2: &ProbabilityVector) -> Result<f64> {
    same_len(p1, p2)?;
    let m: Vec<f64> = p1.0.iter().zip(&p2.0).map(|(a, b)| 0.5 * (a + b)).collect();
    let v = 0.5 * kl_raw(&p1.0, &m) + 0.5 * kl_raw(&p2.0, &m);
    // rounding can leave tiny negatives for identical inputs
    Ok(v.max(0.0))
}

pub fn soft_cross_entropy(p: &ProbabilityVector, t: &ProbabilityVector) -> Result<f64> {
    same_len(p, t)?;
    Ok(soft_ce_kernel(p.as_slice(), t.as_slice()).0)
}

/// Average of the snapshot and current-classifier predictions.
pub fn pseudo_label(f_star: &ProbabilityVector, f_weak: &ProbabilityVector) -> Result<ProbabilityVector> {
    same_len(f_star, f_weak)?;
    Ok(ProbabilityVector(
        f_star.0.iter().zip(&f_weak.0).map(|(a, b)| 0.5 * (a + b)).collect(),
    ))
}

/// Strict confidence test `max(y_hat) > theta`.
pub fn confidence_mask(y_hat: &ProbabilityVector, theta: f64) -> bool {
    y_hat.max() > theta
}

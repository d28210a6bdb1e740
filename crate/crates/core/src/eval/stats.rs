use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{CdaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Infinite when the differences have zero variance and nonzero mean.
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub zero_variance: bool,
}

/// Two-sided paired t-test on `a - b`. All-zero differences give p = 1;
/// constant nonzero differences give p = 0 with `zero_variance` set.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CdaError::InvalidInput(format!(
            "paired t-test needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(CdaError::InvalidInput("paired t-test on non-finite values".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let df = d.len() - 1;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let zero = mean == 0.0;
        return Ok(TTest {
            t: if zero { 0.0 } else { mean.signum() * f64::INFINITY },
            df,
            p_value: if zero { 1.0 } else { 0.0 },
            zero_variance: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| CdaError::InvalidInput(e.to_string()))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        zero_variance: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-sided tail of Student's t by composite Simpson quadrature of the density.
    fn quadrature_p(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        // integrate the central mass over [0, |t|]
        let n = 200_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * s * h / 3.0
    }

    /// Lanczos approximation, g = 7.
    fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn differences_one_to_five() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &[0.0; 5]).unwrap();
        assert_eq!(r.df, 4);
        assert!((r.t - 4.242_640_687).abs() < 1e-8);
        let oracle = quadrature_p(r.t, 4.0);
        assert!((oracle - 0.0132).abs() < 5e-4, "oracle {oracle}");
        assert!((r.p_value - oracle).abs() < 1e-8, "{} vs {oracle}", r.p_value);
    }

    #[test]
    fn identical_series_give_one() {
        let a = [0.3, 0.5, 0.9];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.zero_variance);
    }

    #[test]
    fn constant_nonzero_difference_is_flagged() {
        let r = paired_t_test(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.zero_variance);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn symmetric_in_sign() {
        let (a, b) = ([0.7, 0.8, 0.75, 0.9], [0.6, 0.82, 0.7, 0.8]);
        let x = paired_t_test(&a, &b).unwrap();
        let y = paired_t_test(&b, &a).unwrap();
        assert_eq!(x.p_value, y.p_value);
        assert_eq!(x.t, -y.t);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }
}

//! Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
//! freedom, and the pooled-SD Cohen's d effect size.
//!
//! Sign convention: the test statistic is `mean(excluded) − mean(included)`
//! over the standard error, so a beneficial attribute produces a negative t.
//! Cohen's d is reported as a magnitude.

use crate::attribution::special::student_t_two_sided_p;
use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Welch test outcome; `df` is real-valued.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_and_var(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_samples(excluded: &[f64], included: &[f64]) -> Result<()> {
    if excluded.len() < 2 || included.len() < 2 {
        return Err(Error::Validation(format!(
            "both samples need at least two observations (got {} excluded, {} included)",
            excluded.len(),
            included.len()
        )));
    }
    if excluded.iter().chain(included).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite observation".into()));
    }
    Ok(())
}

/// Two-sample Welch t-test of `excluded` against `included`.
///
/// With zero variance in both samples: equal means give `t = 0, p = 1` by
/// convention; unequal means give an infinite statistic with `p = 0`. The
/// degrees of freedom fall back to `n₀ + n₁ − 2` in either degenerate case.
pub fn welch_ttest(excluded: &[f64], included: &[f64]) -> Result<WelchTest> {
    check_samples(excluded, included)?;
    let (mean_ex, var_ex) = mean_and_var(excluded);
    let (mean_in, var_in) = mean_and_var(included);
    let n_ex = excluded.len() as f64;
    let n_in = included.len() as f64;
    let se_ex = var_ex / n_ex;
    let se_in = var_in / n_in;
    let se2 = se_ex + se_in;
    if se2 == 0.0 {
        let df = n_ex + n_in - 2.0;
        return Ok(if mean_ex == mean_in {
            WelchTest { t: 0.0, df, p: 1.0 }
        } else {
            let t = if mean_ex > mean_in { f64::INFINITY } else { f64::NEG_INFINITY };
            WelchTest { t, df, p: 0.0 }
        });
    }
    let t = (mean_ex - mean_in) / libm::sqrt(se2);
    let df = se2 * se2 / (se_ex * se_ex / (n_ex - 1.0) + se_in * se_in / (n_in - 1.0));
    let p = student_t_two_sided_p(t, df)?;
    Ok(WelchTest { t, df, p })
}

/// Pooled-SD Cohen's d (non-negative). Zero pooled variance with unequal
/// means yields `f64::INFINITY` as the infinite-effect flag; with equal
/// means there is no effect and d is 0.
pub fn cohens_d(excluded: &[f64], included: &[f64]) -> Result<f64> {
    check_samples(excluded, included)?;
    let (mean_ex, var_ex) = mean_and_var(excluded);
    let (mean_in, var_in) = mean_and_var(included);
    let n_ex = excluded.len() as f64;
    let n_in = included.len() as f64;
    let pooled_var =
        ((n_in - 1.0) * var_in + (n_ex - 1.0) * var_ex) / (n_in + n_ex - 2.0);
    let diff = libm::fabs(mean_in - mean_ex);
    if pooled_var == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(diff / libm::sqrt(pooled_var))
}

/// Split a response by a boolean partition, excluded first.
pub fn partition(values: &[f64], included_flags: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut excluded = Vec::new();
    let mut included = Vec::new();
    for (&v, &inc) in values.iter().zip(included_flags) {
        if inc {
            included.push(v);
        } else {
            excluded.push(v);
        }
    }
    (excluded, included)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn identical_samples_are_null() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let res = welch_ttest(&a, &a).unwrap();
        assert_eq!(res.t, 0.0);
        assert!((res.p - 1.0).abs() < 1e-12);
        assert_eq!(cohens_d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_variances() {
        // both flat, equal means
        let res = welch_ttest(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!((res.t, res.p), (0.0, 1.0));
        // both flat, different means: infinite-effect flag
        assert_eq!(cohens_d(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), f64::INFINITY);
        let res = welch_ttest(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(res.t.is_infinite() && res.t < 0.0);
        assert_eq!(res.p, 0.0);
    }

    #[test]
    fn small_samples_are_rejected() {
        assert!(welch_ttest(&[1.0], &[1.0, 2.0]).is_err());
        assert!(cohens_d(&[1.0, 2.0], &[3.0]).is_err());
    }

    #[test]
    fn welch_frozen_reference() {
        // frozen from an independent scipy run on the same samples
        let excluded = [94.6, 91.3, 91.2, 90.7, 89.0, 90.3, 90.6, 88.5, 88.9, 89.6, 89.2, 88.6,
            89.4, 89.0, 89.8, 89.6];
        let included = [95.5, 90.8, 91.9, 92.7, 92.4, 88.5, 93.8, 93.6, 94.5];
        let res = welch_ttest(&excluded, &included).unwrap();
        assert!((res.t - -3.298383420237306).abs() < 1e-12, "t {}", res.t);
        assert!((res.df - 12.759418168406478).abs() < 1e-9, "df {}", res.df);
        assert!((res.p - 0.005897555916288).abs() < 1e-12, "p {}", res.p);
        let d = cohens_d(&excluded, &included).unwrap();
        assert!((d - 1.509045223790581).abs() < 1e-12, "d {d}");
    }

    proptest! {
        // swapping the samples negates t and preserves p
        #[test]
        fn welch_antisymmetry(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let a: Vec<f64> = (0..5 + (seed % 7) as usize).map(|_| rng.normal(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..4 + (seed % 5) as usize).map(|_| rng.normal(0.5, 2.0)).collect();
            let ab = welch_ttest(&a, &b).unwrap();
            let ba = welch_ttest(&b, &a).unwrap();
            prop_assert!((ab.t + ba.t).abs() < 1e-12);
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
            prop_assert!((ab.df - ba.df).abs() < 1e-9);
        }

        // multiplying both samples by c > 0 leaves d unchanged
        #[test]
        fn cohens_d_scale_equivariance(seed in 0u64..500, c in 0.01f64..100.0) {
            let mut rng = SeededRng::new(seed);
            let a: Vec<f64> = (0..6).map(|_| rng.normal(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.normal(1.0, 0.5)).collect();
            let d1 = cohens_d(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * c).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let d2 = cohens_d(&sa, &sb).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1));
        }
    }
}

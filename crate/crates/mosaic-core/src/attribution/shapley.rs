//! Exact interventional Shapley values by full coalition enumeration.
//!
//! The value of a coalition S is the mean model output over the background
//! rows with the instance's features substituted on S. Attributions use the
//! standard combinatorial weights `|S|!(p−|S|−1)!/p!`; by construction they
//! satisfy efficiency (Σφ equals the prediction minus the background mean
//! prediction), symmetry and the dummy axiom exactly.
//!
//! Enumeration is capped at 16 features (2^16 coalitions); composed inputs
//! are memoized by bit pattern, which collapses the cost massively on binary
//! designs.

use crate::attribution::forest::Regressor;
use crate::error::{Error, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Hard cap on exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 16;

/// Per-feature attributions plus the two ends of the efficiency identity.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShapleyResult {
    pub values: Vec<f64>,
    /// v(∅): mean prediction over the background.
    pub base_value: f64,
    /// v(full): the model's prediction at the instance.
    pub prediction: f64,
}

impl ShapleyResult {
    /// Σφ − (prediction − base): zero up to float error by construction.
    pub fn efficiency_residual(&self) -> f64 {
        let total: f64 = self.values.iter().sum();
        total - (self.prediction - self.base_value)
    }
}

/// Exact interventional Shapley values of `model` at `x` against a
/// background set.
pub fn shapley_values<M: Regressor + ?Sized>(
    model: &M,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<ShapleyResult> {
    let p = x.len();
    if p == 0 {
        return Err(Error::Validation("instance has no features".into()));
    }
    if p > MAX_EXACT_FEATURES {
        return Err(Error::Config(format!(
            "{p} features exceed the exact enumeration bound of {MAX_EXACT_FEATURES}; \
             a sampling approximation is out of scope"
        )));
    }
    if background.is_empty() {
        return Err(Error::Validation("background set is empty".into()));
    }
    for row in background {
        if row.len() != p {
            return Err(Error::Dimension("background row width mismatch".into()));
        }
    }

    // memoized predictions keyed on the composed input's bit pattern
    let mut cache: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    let mut predict_cached = |input: &[f64]| -> f64 {
        let key: Vec<u64> = input.iter().map(|v| v.to_bits()).collect();
        if let Some(&hit) = cache.get(&key) {
            return hit;
        }
        let value = model.predict(input);
        cache.insert(key, value);
        value
    };

    // v[mask] = mean over background of the composed prediction
    let n_masks = 1usize << p;
    let mut v = vec![0.0; n_masks];
    let mut composed = vec![0.0; p];
    for (mask, slot) in v.iter_mut().enumerate() {
        let mut acc = 0.0;
        for row in background {
            for i in 0..p {
                composed[i] = if mask >> i & 1 == 1 { x[i] } else { row[i] };
            }
            acc += predict_cached(&composed);
        }
        *slot = acc / background.len() as f64;
    }

    // weights by coalition size
    let mut factorial = vec![1.0f64; p + 1];
    for i in 1..=p {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> =
        (0..p).map(|s| factorial[s] * factorial[p - 1 - s] / factorial[p]).collect();

    let mut values = vec![0.0; p];
    for mask in 0..n_masks {
        let size = (mask as u64).count_ones() as usize;
        for (i, value) in values.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *value += weight[size] * (v[mask | (1 << i)] - v[mask]);
            }
        }
    }

    Ok(ShapleyResult { values, base_value: v[0], prediction: v[n_masks - 1] })
}

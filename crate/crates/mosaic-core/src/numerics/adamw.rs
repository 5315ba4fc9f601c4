//! Named parameter storage and the AdamW update rule.
//!
//! Parameters live in a `BTreeMap` so iteration order (and therefore every
//! downstream reduction) is deterministic. A parameter is either trainable or
//! frozen; frozen parameters are bit-identical before and after any number of
//! optimizer steps.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Named parameters with per-parameter trainable flags.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; the path must be new.
    pub fn insert(&mut self, path: &str, value: Matrix, trainable: bool) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(Error::Validation(format!("duplicate parameter path {path}")));
        }
        self.params.insert(path.to_string(), value);
        self.trainable.insert(path.to_string(), trainable);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Matrix> {
        self.params
            .get(path)
            .ok_or_else(|| Error::NotFound(format!("parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::NotFound(format!("parameter {path}")))
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.trainable.get(path).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        match self.trainable.get_mut(path) {
            Some(flag) => {
                *flag = trainable;
                Ok(())
            }
            None => Err(Error::NotFound(format!("parameter {path}"))),
        }
    }

    /// All paths in deterministic (lexicographic) order.
    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Trainable paths in deterministic order.
    pub fn trainable_paths(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|p| self.is_trainable(p))
            .cloned()
            .collect()
    }

    /// Total number of scalar entries across trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.trainable_paths()
            .iter()
            .map(|p| self.params[p].data().len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// FNV-1a hash over the exact bit patterns of a set of parameters,
    /// in path order. Used to assert the freeze contract.
    pub fn bit_hash<'a>(&self, paths: impl Iterator<Item = &'a String>) -> u64 {
        let mut h: u64 = 0xCBF29CE484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001B3);
            }
        };
        for p in paths {
            mix(p.as_bytes());
            if let Some(m) = self.params.get(p) {
                for v in m.data() {
                    mix(&v.to_bits().to_le_bytes());
                }
            }
        }
        h
    }

    /// Bit hash over every non-trainable parameter.
    pub fn frozen_hash(&self) -> u64 {
        let frozen: Vec<String> = self
            .params
            .keys()
            .filter(|p| !self.is_trainable(p))
            .cloned()
            .collect();
        self.bit_hash(frozen.iter())
    }
}

/// AdamW optimizer state: bias-corrected first/second moments per trainable
/// parameter plus the shared hyperparameters.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWState {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Matrix>,
    second_moment: BTreeMap<String, Matrix>,
}

impl AdamWState {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamWState {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Default hyperparameters except the caller's learning rate.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, (0.9, 0.999), 1e-8, 0.01)
    }
}

/// One decoupled-weight-decay Adam step over the trainable parameters.
///
/// Frozen parameters are untouched even if a gradient is supplied for them.
/// Gradients must be present for every trainable parameter and match its
/// shape.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamWState,
) -> Result<()> {
    let trainable = params.trainable_paths();
    for path in &trainable {
        let grad = grads
            .get(path)
            .ok_or_else(|| Error::NotFound(format!("gradient for {path}")))?;
        if grad.shape() != params.get(path)?.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match parameter {path} {:?}",
                grad.shape(),
                params.get(path)?.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = state.betas;
    let corr1 = 1.0 - libm::pow(b1, state.step as f64);
    let corr2 = 1.0 - libm::pow(b2, state.step as f64);
    for path in &trainable {
        let grad = &grads[path];
        let shape = grad.shape();
        let m = state
            .first_moment
            .entry(path.clone())
            .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        for (m_i, g_i) in m.data_mut().iter_mut().zip(grad.data()) {
            *m_i = b1 * *m_i + (1.0 - b1) * g_i;
        }
        let v = state
            .second_moment
            .entry(path.clone())
            .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        for (v_i, g_i) in v.data_mut().iter_mut().zip(grad.data()) {
            *v_i = b2 * *v_i + (1.0 - b2) * g_i * g_i;
        }
        let m = &state.first_moment[path];
        let v = &state.second_moment[path];
        let theta = params.get_mut(path)?;
        for ((t, m_i), v_i) in theta.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = m_i / corr1;
            let v_hat = v_i / corr2;
            // Decoupled decay: applied to the parameter, not the gradient.
            *t -= state.lr * state.weight_decay * *t;
            *t -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        }
    }
    Ok(())
}

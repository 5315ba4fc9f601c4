//! The attribute-inclusion grid protocol: one stage-2 training run and one
//! evaluation per inclusion mask, sharing the stage-1 anchors.
//!
//! Each cell derives its own seed from the global seed and the mask bits, so
//! cells are independent yet reproducible and two cells with identical masks
//! produce identical rows. Cells are pure functions of the runner, which
//! makes fanning them out across threads safe; the table keeps the caller's
//! config order either way.

use crate::encoder::{build_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::experiments::metrics::evaluate;
use crate::experiments::synthetic::{gen_synthetic, SyntheticDataset, SyntheticSpec};
use crate::numerics::rng::{derive_seed, fnv1a};
use crate::training::{train_stage1, train_stage2, IdentityAnchors, TrainingConfig};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// One grid cell: an inclusion mask plus a human-readable label.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentConfig {
    pub label: String,
    /// One flag per schema group, in schema order.
    pub mask: Vec<bool>,
}

impl ExperimentConfig {
    pub fn new(label: &str, mask: Vec<bool>) -> Self {
        ExperimentConfig { label: label.to_string(), mask }
    }

    /// Stable tag of the mask bits, used for per-cell seed derivation.
    pub fn mask_tag(&self) -> u64 {
        let bytes: Vec<u8> = self.mask.iter().map(|&b| b as u8).collect();
        fnv1a(&bytes)
    }
}

/// One grid row; a failed cell keeps its slot with the error recorded.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResultsRow {
    pub config: ExperimentConfig,
    pub map: f64,
    pub rank1: f64,
    pub error: Option<String>,
}

/// Grid results: feature names plus one row per configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResultsTable {
    pub dataset_tag: String,
    pub feature_names: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

impl ResultsTable {
    /// Rows that completed successfully.
    pub fn ok_rows(&self) -> impl Iterator<Item = &ResultsRow> {
        self.rows.iter().filter(|r| r.error.is_none())
    }

    pub fn find(&self, label: &str) -> Option<&ResultsRow> {
        self.rows.iter().find(|r| r.config.label == label)
    }
}

/// Shared state for one grid: the dataset, the base encoder and the stage-1
/// anchors (computed once, reused by every cell).
pub struct GridRunner {
    pub dataset: SyntheticDataset,
    pub encoder_config: EncoderConfig,
    pub training_config: TrainingConfig,
    pub anchors: IdentityAnchors,
    base_encoder: Encoder,
}

impl GridRunner {
    /// Generate the dataset, build the encoder and fit the shared stage-1
    /// anchors (experts inactive).
    pub fn prepare(
        spec: &SyntheticSpec,
        encoder_config: &EncoderConfig,
        training_config: &TrainingConfig,
    ) -> Result<Self> {
        Self::from_dataset(gen_synthetic(spec)?, encoder_config, training_config)
    }

    /// Same as [`GridRunner::prepare`] but over an already-generated dataset
    /// (e.g. one loaded from disk).
    pub fn from_dataset(
        dataset: SyntheticDataset,
        encoder_config: &EncoderConfig,
        training_config: &TrainingConfig,
    ) -> Result<Self> {
        let spec = &dataset.spec;
        let encoder_config = encoder_config.clone();
        if encoder_config.seq_len != spec.seq_len || encoder_config.d_model != spec.d_model {
            return Err(Error::Config(
                "encoder seq_len/d_model must match the dataset spec".into(),
            ));
        }
        encoder_config.validate()?;
        let base_encoder = build_encoder(&encoder_config, &spec.schema, training_config.seed)?;
        let anchors = train_stage1(
            &base_encoder,
            &dataset.training_view(),
            spec.n_train_identities,
            training_config,
        )?;
        Ok(GridRunner {
            dataset,
            encoder_config,
            training_config: training_config.clone(),
            anchors,
            base_encoder,
        })
    }

    /// Run one cell: stage-2 training under the mask, then evaluation under
    /// the same mask. Pure function of `self` and the config.
    pub fn run_cell(&self, config: &ExperimentConfig) -> ResultsRow {
        self.run_cell_with_model(config).0
    }

    /// Like [`GridRunner::run_cell`] but also returns the trained encoder
    /// and the per-epoch loss trace of a successful cell, for checkpointing
    /// and trace persistence.
    pub fn run_cell_with_model(
        &self,
        config: &ExperimentConfig,
    ) -> (ResultsRow, Option<(Encoder, Vec<f64>)>) {
        match self.try_cell(config) {
            Ok((map, rank1, encoder, trace)) => (
                ResultsRow { config: config.clone(), map, rank1, error: None },
                Some((encoder, trace)),
            ),
            Err(e) => (
                ResultsRow {
                    config: config.clone(),
                    map: f64::NAN,
                    rank1: f64::NAN,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    }

    fn try_cell(&self, config: &ExperimentConfig) -> Result<(f64, f64, Encoder, Vec<f64>)> {
        if config.mask.len() != self.dataset.spec.schema.len() {
            return Err(Error::Validation(
                "mask length does not match the schema".into(),
            ));
        }
        let mut encoder = self.base_encoder.clone();
        let mut cell_training = self.training_config.clone();
        cell_training.seed = derive_seed(self.training_config.seed, config.mask_tag());
        let outcome = train_stage2(
            &mut encoder,
            &self.anchors,
            &self.dataset.training_view(),
            &config.mask,
            &cell_training,
        )?;
        let result = evaluate(&encoder, &self.dataset, &config.mask)?;
        Ok((result.map, result.rank1, encoder, outcome.epoch_losses))
    }

    /// Run every cell sequentially. Per-cell failures are recorded in their
    /// rows; the grid continues.
    pub fn run(&self, configs: &[ExperimentConfig]) -> Result<ResultsTable> {
        if configs.is_empty() {
            return Err(Error::Validation("empty grid".into()));
        }
        let rows = configs.iter().map(|c| self.run_cell(c)).collect();
        Ok(ResultsTable {
            dataset_tag: "synthetic".to_string(),
            feature_names: self.dataset.spec.schema.group_names(),
            rows,
        })
    }
}

/// Convenience wrapper: prepare a runner and execute the whole grid.
pub fn run_grid(
    configs: &[ExperimentConfig],
    spec: &SyntheticSpec,
    encoder_config: &EncoderConfig,
    training_config: &TrainingConfig,
) -> Result<ResultsTable> {
    GridRunner::prepare(spec, encoder_config, training_config)?.run(configs)
}

/// The all-included and all-excluded masks for a schema of `n` groups.
pub fn endpoint_configs(n: usize) -> Vec<ExperimentConfig> {
    alloc::vec![
        ExperimentConfig::new("all attributes", alloc::vec![true; n]),
        ExperimentConfig::new("no attributes", alloc::vec![false; n]),
    ]
}

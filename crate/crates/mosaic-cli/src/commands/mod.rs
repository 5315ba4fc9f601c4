//! Subcommand implementations behind the `mosaic` binary.

pub mod analyze;
pub mod gen_data;
pub mod run_grid;
pub mod sweep_k;

use crate::{CliError, CliResult};
use mosaic_core::encoder::EncoderConfig;
use mosaic_core::experiments::synthetic::SyntheticSpec;
use mosaic_core::training::TrainingConfig;
use serde::de::DeserializeOwned;
use std::path::Path;

/// Read and parse a JSON config; parse failures are usage errors.
pub(crate) fn load_json_config<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

/// Encoder config from an optional file, shaped to the dataset dimensions
/// when defaulted.
pub(crate) fn encoder_config_for(
    path: Option<&Path>,
    spec: &SyntheticSpec,
) -> CliResult<EncoderConfig> {
    let config = match path {
        Some(p) => load_json_config(p, "encoder config")?,
        None => EncoderConfig { seq_len: spec.seq_len, d_model: spec.d_model, ..Default::default() },
    };
    config
        .validate()
        .map_err(|e| CliError::usage(format!("encoder config: {e}")))?;
    Ok(config)
}

/// Training config from an optional file plus an optional seed override.
pub(crate) fn training_config_from(
    path: Option<&Path>,
    seed: Option<u64>,
) -> CliResult<TrainingConfig> {
    let mut config: TrainingConfig = match path {
        Some(p) => load_json_config(p, "training config")?,
        None => TrainingConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config
        .validate()
        .map_err(|e| CliError::usage(format!("training config: {e}")))?;
    Ok(config)
}

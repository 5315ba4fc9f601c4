//! `mosaic run-grid`: one stage-2 training and evaluation per inclusion
//! mask, with idempotent resume and optional fan-out across threads.
//!
//! Each cell owns a directory `runs/<label>-<tag>/` holding its result row,
//! its trained expert checkpoint and a manifest recording the dataset hash
//! and the cell seed. A rerun over the same inputs reuses finished cells;
//! `--parallel N` changes wall time, never results.

use crate::commands::{encoder_config_for, load_json_config, training_config_from};
use crate::manifest::{sha256_file, RunManifest};
use crate::{formats, CliError, CliResult};
use clap::Args;
use mosaic_core::experiments::grid::{ExperimentConfig, GridRunner, ResultsRow, ResultsTable};
use mosaic_core::numerics::rng::derive_seed;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, Args)]
pub struct RunGridArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Grid file: a JSON list of {label, mask} configurations.
    #[arg(long)]
    pub grid: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of worker threads for grid cells (1 = serial).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Encoder config JSON (defaults to the desk-scale encoder sized to the
    /// dataset).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Training config JSON (defaults to the desk-scale schedule).
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn cell_dir(out: &Path, config: &ExperimentConfig) -> PathBuf {
    out.join("runs").join(format!("{}-{:016x}", sanitize(&config.label), config.mask_tag()))
}

/// A finished cell can be reused when its manifest matches the current
/// dataset hash and derived seed.
fn try_resume(dir: &Path, dataset_hash: &str, cell_seed: u64) -> Option<ResultsRow> {
    let manifest = RunManifest::load(dir).ok()?;
    if manifest.input_hashes.get("dataset").map(String::as_str) != Some(dataset_hash) {
        return None;
    }
    if manifest.seeds.get("cell").copied() != Some(cell_seed) {
        return None;
    }
    let text = std::fs::read_to_string(dir.join("row.json")).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn run(args: &RunGridArgs) -> CliResult<()> {
    let dataset_path = args.dataset.join("dataset.json");
    let dataset = formats::load_dataset(&dataset_path)
        .map_err(|e| CliError::usage(format!("dataset: {e:#}")))?;
    let dataset_hash = sha256_file(&dataset_path).map_err(CliError::Runtime)?;
    let configs: Vec<ExperimentConfig> = load_json_config(&args.grid, "grid file")?;
    if configs.is_empty() {
        return Err(CliError::usage("grid file contains no configurations"));
    }
    for config in &configs {
        if config.mask.len() != dataset.spec.schema.len() {
            return Err(CliError::usage(format!(
                "config '{}' has a mask of length {}, schema has {} groups",
                config.label,
                config.mask.len(),
                dataset.spec.schema.len()
            )));
        }
    }
    let encoder_config = encoder_config_for(args.encoder.as_deref(), &dataset.spec)?;
    let training_config = training_config_from(args.training.as_deref(), args.seed)?;

    eprintln!("preparing runner (stage-1 anchors)...");
    let runner = GridRunner::from_dataset(dataset, &encoder_config, &training_config)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    let run_one = |config: &ExperimentConfig| -> anyhow::Result<ResultsRow> {
        let dir = cell_dir(&args.out, config);
        let cell_seed = derive_seed(training_config.seed, config.mask_tag());
        if let Some(row) = try_resume(&dir, &dataset_hash, cell_seed) {
            eprintln!("cell '{}': reusing finished run", config.label);
            return Ok(row);
        }
        let (row, model) = runner.run_cell_with_model(config);
        std::fs::create_dir_all(&dir)?;
        let row_path = dir.join("row.json");
        let mut text = serde_json::to_string_pretty(&row)?;
        text.push('\n');
        std::fs::write(&row_path, text)?;
        let mut manifest = RunManifest::new("run-grid-cell", serde_json::to_value(config)?)
            .seed("cell", cell_seed)
            .seed("training", training_config.seed);
        manifest.input_hashes.insert("dataset".into(), dataset_hash.clone());
        if let Some((encoder, trace)) = model {
            let ckpt_path = dir.join("experts.json");
            formats::ExpertCheckpoint::from_encoder(&encoder)?.save(&ckpt_path)?;
            manifest = manifest.output("experts.json", &ckpt_path)?;
            let trace_path = dir.join("trace.json");
            let mut text = serde_json::to_string_pretty(
                &serde_json::json!({ "epoch_mean_loss": trace }),
            )?;
            text.push('\n');
            std::fs::write(&trace_path, text)?;
            manifest = manifest.output("trace.json", &trace_path)?;
        }
        manifest = manifest.output("row.json", &row_path)?;
        manifest.save(&dir)?;
        eprintln!(
            "cell '{}': mAP {:.2} rank1 {:.2}{}",
            config.label,
            row.map,
            row.rank1,
            row.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
        Ok(row)
    };

    let rows: Vec<ResultsRow> = if args.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.parallel)
            .build()
            .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
        pool.install(|| configs.par_iter().map(|c| run_one(c)).collect::<anyhow::Result<_>>())
            .map_err(CliError::Runtime)?
    } else {
        configs
            .iter()
            .map(run_one)
            .collect::<anyhow::Result<_>>()
            .map_err(CliError::Runtime)?
    };

    let table = ResultsTable {
        dataset_tag: "synthetic".into(),
        feature_names: runner.dataset.spec.schema.group_names(),
        rows,
    };
    let csv_path = args.out.join("results.csv");
    let json_path = args.out.join("results.json");
    let finish = || -> anyhow::Result<()> {
        formats::save_results_csv(&csv_path, &table)?;
        formats::save_results_json(&json_path, &table)?;
        let manifest = RunManifest::new(
            "run-grid",
            serde_json::json!({
                "grid": args.grid.display().to_string(),
                "encoder": encoder_config,
                "training": training_config,
                "parallel": args.parallel,
            }),
        )
        .seed("training", training_config.seed)
        .input("dataset", &dataset_path)?
        .input("grid", &args.grid)?
        .output("results.csv", &csv_path)?
        .output("results.json", &json_path)?;
        manifest.save(&args.out)?;
        Ok(())
    };
    finish().map_err(CliError::Runtime)?;

    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells, {} ok, {} failed -> {}",
        table.rows.len(),
        table.rows.len() - failed,
        failed,
        csv_path.display()
    );
    if failed == table.rows.len() {
        return Err(CliError::Runtime(anyhow::anyhow!("every grid cell failed")));
    }
    Ok(())
}

//! `mosaic sweep-k`: vary how many trailing blocks carry expert groups and
//! report the all-attributes retrieval metrics per K.

use crate::commands::{encoder_config_for, training_config_from};
use crate::manifest::RunManifest;
use crate::{formats, CliError, CliResult};
use clap::Args;
use mosaic_core::experiments::grid::{ExperimentConfig, GridRunner};
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct SweepKArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated K values, e.g. `1,2,4`.
    #[arg(long)]
    pub k: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder config JSON; K is overridden per sweep point.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &SweepKArgs) -> CliResult<()> {
    let dataset_path = args.dataset.join("dataset.json");
    let dataset = formats::load_dataset(&dataset_path)
        .map_err(|e| CliError::usage(format!("dataset: {e:#}")))?;
    let base_config = encoder_config_for(args.encoder.as_deref(), &dataset.spec)?;
    let training_config = training_config_from(args.training.as_deref(), args.seed)?;
    let ks: Vec<usize> = args
        .k
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("invalid K value '{s}'")))
        })
        .collect::<CliResult<_>>()?;
    if ks.is_empty() {
        return Err(CliError::usage("no K values given"));
    }
    for &k in &ks {
        if k == 0 || k > base_config.depth {
            return Err(CliError::usage(format!(
                "K={k} outside 1..={} (encoder depth)",
                base_config.depth
            )));
        }
    }

    let all_on = ExperimentConfig::new(
        "all attributes",
        vec![true; dataset.spec.schema.len()],
    );
    let mut results = Vec::new();
    for &k in &ks {
        let mut config = base_config.clone();
        config.mosaic_last_k = k;
        let runner = GridRunner::from_dataset(dataset.clone(), &config, &training_config)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
        let row = runner.run_cell(&all_on);
        if let Some(err) = &row.error {
            return Err(CliError::Runtime(anyhow::anyhow!("K={k}: {err}")));
        }
        eprintln!("K={k}: mAP {:.2} rank1 {:.2}", row.map, row.rank1);
        results.push((k, row.map, row.rank1));
    }

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let sweep_path = args.out.join("sweep.csv");
    let write = || -> anyhow::Result<()> {
        let mut writer = csv::Writer::from_path(&sweep_path)?;
        writer.write_record(["k", "map", "rank1"])?;
        for (k, map, rank1) in &results {
            writer.write_record([k.to_string(), format!("{map}"), format!("{rank1}")])?;
        }
        writer.flush()?;
        let manifest = RunManifest::new(
            "sweep-k",
            serde_json::json!({ "k": args.k, "encoder": base_config, "training": training_config }),
        )
        .seed("training", training_config.seed)
        .input("dataset", &dataset_path)?
        .output("sweep.csv", &sweep_path)?;
        manifest.save(&args.out)?;
        Ok(())
    };
    write().map_err(CliError::Runtime)?;
    println!("sweep written to {}", sweep_path.display());
    Ok(())
}

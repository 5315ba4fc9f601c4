//! `mosaic gen-data`: generate a synthetic benchmark directory.

use crate::commands::load_json_config;
use crate::manifest::RunManifest;
use crate::{formats, CliError, CliResult};
use anyhow::Context;
use clap::Args;
use mosaic_core::experiments::synthetic::{gen_synthetic, SyntheticSpec};
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Generator spec as JSON; defaults to the bundled desk-scale spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &GenDataArgs) -> CliResult<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => load_json_config(path, "generator spec")?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(|e| CliError::usage(format!("generator spec: {e}")))?;

    let dataset = gen_synthetic(&spec).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Runtime)?;
    let dataset_path = args.out.join("dataset.json");
    let spec_path = args.out.join("spec.json");
    let write = || -> anyhow::Result<RunManifest> {
        formats::save_dataset(&dataset_path, &dataset)?;
        // effective-config dump for auditability
        let mut spec_text = serde_json::to_string_pretty(&spec)?;
        spec_text.push('\n');
        std::fs::write(&spec_path, spec_text)?;
        let manifest = RunManifest::new("gen-data", serde_json::to_value(&spec)?)
            .seed("spec", spec.seed)
            .output("dataset.json", &dataset_path)?
            .output("spec.json", &spec_path)?;
        manifest.save(&args.out)?;
        Ok(manifest)
    };
    let manifest = write().map_err(CliError::Runtime)?;
    println!(
        "wrote {} images ({} train / {} query / {} gallery) to {}",
        dataset.train.len() + dataset.query.len() + dataset.gallery.len(),
        dataset.train.len(),
        dataset.query.len(),
        dataset.gallery.len(),
        args.out.display()
    );
    println!("dataset sha256 {}", manifest.output_hashes["dataset.json"]);
    Ok(())
}

//! `mosaic analyze`: GLM, random-forest importances, Shapley attributions
//! and hypothesis tests over a results table (bundled fixture or a file),
//! emitted as JSON, CSV and optional SVG charts.

use crate::manifest::RunManifest;
use crate::{fixtures, formats, svg, CliError, CliResult};
use clap::Args;
use mosaic_core::attribution::{full_report, RfParams};
use mosaic_core::attribution::design::Response;
use std::path::PathBuf;

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Bundled reference grid (market, duke, or the _map/_r1 aliases).
    #[arg(long, conflicts_with = "results")]
    pub fixture: Option<String>,
    /// Results table file (.json or .csv from run-grid).
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Response metric.
    #[arg(long, value_parser = ["map", "rank1"], default_value = "map")]
    pub response: String,
    /// Emit the GLM coefficient table.
    #[arg(long)]
    pub glm: bool,
    /// Emit random-forest FIMP/PIMP.
    #[arg(long)]
    pub rf: bool,
    /// Emit Welch t-tests and Cohen's d.
    #[arg(long)]
    pub ttest: bool,
    /// Emit mean absolute Shapley attributions.
    #[arg(long)]
    pub shap: bool,
    /// Also render SVG bar charts.
    #[arg(long)]
    pub svg: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Forest size.
    #[arg(long, default_value_t = 500)]
    pub trees: usize,
    /// Permutation-importance repeats.
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Seed for the forest and the permutations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: &AnalyzeArgs) -> CliResult<()> {
    let table = match (&args.fixture, &args.results) {
        (Some(name), None) => {
            fixtures::load_fixture(name).map_err(|e| CliError::usage(format!("{e:#}")))?
        }
        (None, Some(path)) => formats::load_results_auto(path)
            .map_err(|e| CliError::usage(format!("results file: {e:#}")))?,
        _ => {
            return Err(CliError::usage(
                "exactly one of --fixture or --results must be given",
            ))
        }
    };
    let response = match args.response.as_str() {
        "rank1" => Response::Rank1,
        _ => Response::Map,
    };
    // no method flag means every method
    let all = !(args.glm || args.rf || args.ttest || args.shap);
    let want_glm = all || args.glm;
    let want_importance = all || args.rf || args.ttest || args.shap;

    let rf_params = RfParams { n_trees: args.trees, ..RfParams::default() };
    let report = full_report(&table, response, &rf_params, args.repeats, args.seed)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let mut manifest = RunManifest::new(
        "analyze",
        serde_json::json!({
            "source": args.fixture.clone().unwrap_or_else(|| args.results.as_ref().unwrap().display().to_string()),
            "response": args.response,
            "trees": args.trees,
            "repeats": args.repeats,
        }),
    )
    .seed("analysis", args.seed);

    let mut write = || -> anyhow::Result<RunManifest> {
        let report_path = args.out.join("report.json");
        formats::save_report_json(&report_path, &report)?;
        manifest = manifest.clone().output("report.json", &report_path)?;
        if want_glm {
            if let Some(glm) = &report.glm {
                let glm_path = args.out.join("glm.csv");
                formats::save_glm_csv(&glm_path, glm)?;
                manifest = manifest.clone().output("glm.csv", &glm_path)?;
            } else if let Some(err) = &report.glm_error {
                eprintln!("glm section unavailable: {err}");
            }
        }
        if want_importance {
            let imp_path = args.out.join("importance.csv");
            formats::save_importance_csv(&imp_path, &report)?;
            manifest = manifest.clone().output("importance.csv", &imp_path)?;
        }
        if args.svg {
            let charts: [(&str, Box<dyn Fn(&mosaic_core::attribution::FeatureImportanceRow) -> Option<f64>>); 5] = [
                ("fimp", Box::new(|r| r.fimp)),
                ("pimp", Box::new(|r| r.pimp)),
                ("shapley", Box::new(|r| r.mean_abs_shapley)),
                ("tstat", Box::new(|r| r.t)),
                ("cohens_d", Box::new(|r| r.cohens_d)),
            ];
            for (name, get) in charts {
                let pairs: Vec<(String, f64)> = report
                    .importance
                    .rows
                    .iter()
                    .filter_map(|r| get(r).map(|v| (r.name.clone(), v)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let path = args.out.join(format!("{name}.svg"));
                std::fs::write(&path, svg::bar_chart(name, &pairs))?;
                manifest = manifest.clone().output(&format!("{name}.svg"), &path)?;
            }
        }
        Ok(manifest.clone())
    };
    let manifest = write().map_err(CliError::Runtime)?;
    manifest.save(&args.out).map_err(CliError::Runtime)?;
    println!("analysis written to {}", args.out.display());
    Ok(())
}

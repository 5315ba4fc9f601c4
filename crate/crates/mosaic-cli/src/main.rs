//! Command-line surface: data generation, grid runs, attribute-importance
//! analysis and the last-K sweep. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or validation error.

use clap::{Parser, Subcommand};
use mosaic_cli::commands::{analyze, gen_data, run_grid, sweep_k};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mosaic",
    version,
    about = "Attribute-expert ReID benchmark and attribute-importance analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    GenData(gen_data::GenDataArgs),
    /// Train and evaluate one cell per attribute-inclusion mask.
    RunGrid(run_grid::RunGridArgs),
    /// Fit the importance analyses over a results table or bundled fixture.
    Analyze(analyze::AnalyzeArgs),
    /// Sweep the number of expert-carrying encoder blocks.
    SweepK(sweep_k::SweepKArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::RunGrid(args) => run_grid::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::SweepK(args) => sweep_k::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

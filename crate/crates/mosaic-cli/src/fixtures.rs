//! Bundled reference grids: the published Market-1501 and DukeMTMC
//! attribute-inclusion results tables (25 × 12 and 20 × 10), shipped as
//! versioned JSON and embedded at compile time.

use anyhow::{bail, Context, Result};
use mosaic_core::experiments::grid::ResultsTable;
use serde::Deserialize;

const MARKET_GRID: &str = include_str!("../fixtures/market_grid.json");
const DUKE_GRID: &str = include_str!("../fixtures/duke_grid.json");

/// Current fixture file format.
pub const FIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
struct FixtureFile {
    format_version: u32,
    table: ResultsTable,
}

fn parse(raw: &str, name: &str) -> Result<ResultsTable> {
    let file: FixtureFile =
        serde_json::from_str(raw).with_context(|| format!("parsing fixture {name}"))?;
    if file.format_version != FIXTURE_FORMAT_VERSION {
        bail!(
            "fixture {name} has format version {}, expected {FIXTURE_FORMAT_VERSION}",
            file.format_version
        );
    }
    Ok(file.table)
}

/// Load a bundled grid by name. Both metrics ride along in every row, so the
/// `_map` / `_r1` aliases resolve to the same table; the response flag picks
/// the column downstream.
pub fn load_fixture(name: &str) -> Result<ResultsTable> {
    match name {
        "market" | "market_map" | "market_r1" => parse(MARKET_GRID, "market"),
        "duke" | "duke_map" | "duke_r1" => parse(DUKE_GRID, "duke"),
        other => bail!("unknown fixture '{other}' (expected market[_map|_r1] or duke[_map|_r1])"),
    }
}

/// Names accepted by [`load_fixture`].
pub const FIXTURE_NAMES: [&str; 6] =
    ["market", "market_map", "market_r1", "duke", "duke_map", "duke_r1"];

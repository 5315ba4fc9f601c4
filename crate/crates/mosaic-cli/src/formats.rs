//! On-disk formats: versioned JSON documents for schemas, datasets, results
//! tables, model checkpoints and analysis reports, plus the fixed-layout CSV
//! renderings.
//!
//! All JSON is written pretty-printed with a trailing newline; every
//! document that is meant to outlive a single run carries a
//! `format_version`. CSV column orders are fixed: results are one 0/1
//! column per attribute followed by `map,rank1`; the GLM table is
//! `term,coef,std_err,z,p,ci_low,ci_high`; the importance table is
//! `feature,fimp,pimp,mean_abs_shapley,t,df,p,cohens_d`.

use anyhow::{bail, Context, Result};
use mosaic_core::attribution::{FullReport, GLMFit};
use mosaic_core::encoder::{Encoder, EncoderConfig};
use mosaic_core::experiments::grid::{ExperimentConfig, ResultsRow, ResultsTable};
use mosaic_core::experiments::synthetic::SyntheticDataset;
use mosaic_core::numerics::{Matrix, ParamStore};
use mosaic_core::schema::AttributeSchema;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Format version shared by the JSON documents this crate writes.
pub const FORMAT_VERSION: u32 = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .with_context(|| format!("serializing {}", path.display()))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Versioned wrapper for any payload.
#[derive(Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    #[serde(flatten)]
    pub payload: T,
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        bail!("{what} has format version {version}, expected {FORMAT_VERSION}");
    }
    Ok(())
}

// ---- schema ----

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    format_version: u32,
    schema: AttributeSchema,
}

pub fn save_schema(path: &Path, schema: &AttributeSchema) -> Result<()> {
    write_json(path, &SchemaFile { format_version: FORMAT_VERSION, schema: schema.clone() })
}

pub fn load_schema(path: &Path) -> Result<AttributeSchema> {
    let file: SchemaFile = read_json(path)?;
    check_version(file.format_version, "schema file")?;
    Ok(file.schema)
}

/// Canonical hex SHA-256 of a schema, used to reject mismatched checkpoint
/// loads.
pub fn schema_hash(schema: &AttributeSchema) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(schema).expect("schema serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    hex_string(&digest)
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- dataset ----

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    dataset: SyntheticDataset,
}

pub fn save_dataset(path: &Path, dataset: &SyntheticDataset) -> Result<()> {
    write_json(path, &DatasetFile { format_version: FORMAT_VERSION, dataset: dataset.clone() })
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let file: DatasetFile = read_json(path)?;
    check_version(file.format_version, "dataset file")?;
    Ok(file.dataset)
}

// ---- results tables ----

#[derive(Serialize, Deserialize)]
struct ResultsFile {
    format_version: u32,
    table: ResultsTable,
}

pub fn save_results_json(path: &Path, table: &ResultsTable) -> Result<()> {
    write_json(path, &ResultsFile { format_version: FORMAT_VERSION, table: table.clone() })
}

pub fn load_results_json(path: &Path) -> Result<ResultsTable> {
    let file: ResultsFile = read_json(path)?;
    check_version(file.format_version, "results file")?;
    Ok(file.table)
}

/// Fixed-layout CSV: one 0/1 column per attribute, then `map,rank1`.
/// Rows that failed their grid cell are skipped (they have no metrics).
pub fn save_results_csv(path: &Path, table: &ResultsTable) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = table.feature_names.clone();
    header.push("map".into());
    header.push("rank1".into());
    writer.write_record(&header)?;
    for row in table.ok_rows() {
        let mut record: Vec<String> =
            row.config.mask.iter().map(|&b| if b { "1" } else { "0" }.to_string()).collect();
        record.push(format!("{}", row.map));
        record.push(format!("{}", row.rank1));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse a results CSV back into a table; labels are synthesized from the
/// mask bits.
pub fn load_results_csv(path: &Path) -> Result<ResultsTable> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let cols = headers.len();
    if cols < 3 || &headers[cols - 2] != "map" || &headers[cols - 1] != "rank1" {
        bail!("results CSV must end with map,rank1 columns");
    }
    let feature_names: Vec<String> =
        headers.iter().take(cols - 2).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mask: Vec<bool> = (0..cols - 2)
            .map(|c| match &record[c] {
                "1" => Ok(true),
                "0" => Ok(false),
                other => bail!("row {i}: expected 0/1 in column {c}, got '{other}'"),
            })
            .collect::<Result<_>>()?;
        let map: f64 = record[cols - 2].parse().context("map column")?;
        let rank1: f64 = record[cols - 1].parse().context("rank1 column")?;
        let label: String = mask
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        rows.push(ResultsRow {
            config: ExperimentConfig::new(&format!("mask {label}"), mask),
            map,
            rank1,
            error: None,
        });
    }
    Ok(ResultsTable { dataset_tag: "csv".into(), feature_names, rows })
}

/// Load a results table from `.json` or `.csv` by extension.
pub fn load_results_auto(path: &Path) -> Result<ResultsTable> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => load_results_json(path),
        Some("csv") => load_results_csv(path),
        _ => bail!("results file must end in .json or .csv"),
    }
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct ExpertPair {
    a: Matrix,
    b: Matrix,
}

#[derive(Serialize, Deserialize)]
struct ExpertBlock {
    block: usize,
    experts: Vec<ExpertPair>,
}

#[derive(Serialize, Deserialize)]
struct ExpertGroupEntry {
    name: String,
    blocks: Vec<ExpertBlock>,
}

/// Expert-only checkpoint: per-group, per-expert A/B matrices plus the
/// schema hash that guards against loading them into a mismatched taxonomy.
#[derive(Serialize, Deserialize)]
pub struct ExpertCheckpoint {
    pub format_version: u32,
    pub schema_hash: String,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    groups: Vec<ExpertGroupEntry>,
}

impl ExpertCheckpoint {
    pub fn from_encoder(encoder: &Encoder) -> Result<Self> {
        let mut groups = Vec::new();
        for (gi, group) in encoder.schema.groups().iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..encoder.config.depth {
                if !mosaic_core::encoder::block_is_wrapped(&encoder.config, b) {
                    continue;
                }
                let experts = (0..group.ty.expert_count())
                    .map(|ei| -> Result<ExpertPair> {
                        let a = encoder
                            .params
                            .get(&format!("block{b}.moe.g{gi}.e{ei}.a"))
                            .map_err(anyhow::Error::msg)?;
                        let bm = encoder
                            .params
                            .get(&format!("block{b}.moe.g{gi}.e{ei}.b"))
                            .map_err(anyhow::Error::msg)?;
                        Ok(ExpertPair { a: a.clone(), b: bm.clone() })
                    })
                    .collect::<Result<_>>()?;
                blocks.push(ExpertBlock { block: b, experts });
            }
            groups.push(ExpertGroupEntry { name: group.name.clone(), blocks });
        }
        Ok(ExpertCheckpoint {
            format_version: FORMAT_VERSION,
            schema_hash: schema_hash(&encoder.schema),
            lora_rank: encoder.config.lora_rank,
            lora_scaling: encoder.config.lora_scaling,
            groups,
        })
    }

    /// Write the expert matrices back into an encoder. The schema hash must
    /// match, so experts can never silently land in the wrong groups.
    pub fn apply_to(&self, encoder: &mut Encoder) -> Result<()> {
        check_version(self.format_version, "expert checkpoint")?;
        let expected = schema_hash(&encoder.schema);
        if self.schema_hash != expected {
            bail!(
                "expert checkpoint was trained against a different schema \
                 (hash {} vs {expected})",
                self.schema_hash
            );
        }
        for (gi, entry) in self.groups.iter().enumerate() {
            for block in &entry.blocks {
                for (ei, pair) in block.experts.iter().enumerate() {
                    let b = block.block;
                    *encoder
                        .params
                        .get_mut(&format!("block{b}.moe.g{gi}.e{ei}.a"))
                        .map_err(anyhow::Error::msg)? = pair.a.clone();
                    *encoder
                        .params
                        .get_mut(&format!("block{b}.moe.g{gi}.e{ei}.b"))
                        .map_err(anyhow::Error::msg)? = pair.b.clone();
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Full model checkpoint: config, schema, and the complete parameter store
/// (base weights included).
#[derive(Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub encoder_config: EncoderConfig,
    pub schema: AttributeSchema,
    pub schema_hash: String,
    pub params: ParamStore,
}

impl ModelCheckpoint {
    pub fn from_encoder(encoder: &Encoder) -> Self {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            encoder_config: encoder.config.clone(),
            schema: encoder.schema.clone(),
            schema_hash: schema_hash(&encoder.schema),
            params: encoder.params.clone(),
        }
    }

    pub fn into_encoder(self) -> Result<Encoder> {
        check_version(self.format_version, "model checkpoint")?;
        self.encoder_config.validate().map_err(anyhow::Error::msg)?;
        if schema_hash(&self.schema) != self.schema_hash {
            bail!("model checkpoint schema hash mismatch");
        }
        Ok(Encoder { config: self.encoder_config, schema: self.schema, params: self.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

// ---- reports ----

#[derive(Serialize, Deserialize)]
struct ReportFile {
    format_version: u32,
    report: FullReport,
}

pub fn save_report_json(path: &Path, report: &FullReport) -> Result<()> {
    write_json(path, &ReportFile { format_version: FORMAT_VERSION, report: report.clone() })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        Some(x) if x.is_infinite() => "inf".into(),
        _ => "NA".into(),
    }
}

/// GLM coefficient table: `term,coef,std_err,z,p,ci_low,ci_high`.
pub fn save_glm_csv(path: &Path, fit: &GLMFit) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["term", "coef", "std_err", "z", "p", "ci_low", "ci_high"])?;
    for term in &fit.terms {
        writer.write_record([
            term.name.clone(),
            format!("{:.6}", term.coef),
            format!("{:.6}", term.se),
            fmt_opt(term.z),
            fmt_opt(term.p),
            format!("{:.6}", term.ci_low),
            format!("{:.6}", term.ci_high),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Importance table: `feature,fimp,pimp,mean_abs_shapley,t,df,p,cohens_d`.
pub fn save_importance_csv(path: &Path, report: &FullReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "feature",
        "fimp",
        "pimp",
        "mean_abs_shapley",
        "t",
        "df",
        "p",
        "cohens_d",
    ])?;
    for row in &report.importance.rows {
        writer.write_record([
            row.name.clone(),
            fmt_opt(row.fimp),
            fmt_opt(row.pimp),
            fmt_opt(row.mean_abs_shapley),
            fmt_opt(row.t),
            fmt_opt(row.df),
            fmt_opt(row.p),
            fmt_opt(row.cohens_d),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

//! Run manifests: every output directory gets exactly one `manifest.json`
//! recording the command, the effective configuration, the seeds, and the
//! SHA-256 hashes of inputs and outputs. The creation timestamp lives only
//! here, so all other artifacts are byte-reproducible.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub created_unix: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            format_version: crate::formats::FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds: BTreeMap::new(),
            config,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.input_hashes.insert(name.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, name: &str, path: &Path) -> Result<Self> {
        self.output_hashes.insert(name.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join("manifest.json"), text)
            .with_context(|| format!("writing manifest in {}", dir.display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    crate::formats::hex_string(&Sha256::digest(bytes))
}

//! `run.json`: what produced the files in an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use birdscape::ingest::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{io, CliError};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub tool: String,
    pub tool_version: String,
    pub seed: u64,
    /// SHA-256 of the effective configuration rendered as TOML.
    pub config_sha256: String,
    /// Input file path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output files, relative to the directory holding run.json.
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config_toml: &str) -> Self {
        Self {
            command: command.into(),
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn output(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    /// Write `<dir>/run.json` with outputs sorted.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.outputs.sort();
        self.outputs.dedup();
        let path = dir.join(RUN_FILE);
        let mut text = serde_json::to_string_pretty(&self).expect("run record serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))
    }
}

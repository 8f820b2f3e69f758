use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use update_core::dataset::UpdateSpec;

use crate::{io_err, CliError};

/// Record of what a command produced and from which settings. Paths are
/// relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub corpus_source: String,
    pub updates: Vec<UpdateSpec>,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Keyed by `update/strategy/seed` (or the sweep's cell key).
    pub cells: BTreeMap<String, CellEntry>,
    pub artifacts: BTreeSet<String>,
    pub fallback_notes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_accuracy: Option<f64>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, corpus_source: String) -> Self {
        RunManifest {
            command: command.into(),
            config_hash,
            corpus_source,
            updates: Vec::new(),
            strategies: Vec::new(),
            seeds: Vec::new(),
            started_unix: now_unix(),
            finished_unix: None,
            cells: BTreeMap::new(),
            artifacts: BTreeSet::new(),
            fallback_notes: BTreeSet::new(),
        }
    }

    /// Loads `path` if present. An existing manifest from another config is
    /// an error, so results from different settings never mix.
    pub fn open(path: &Path, command: &str, config_hash: &str, corpus_source: &str) -> Result<Self, CliError> {
        if !path.exists() {
            return Ok(RunManifest::new(command, config_hash.into(), corpus_source.into()));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
        if m.config_hash != config_hash {
            return Err(CliError::ConfigMismatch {
                path: path.display().to_string(),
                found: m.config_hash,
                expected: config_hash.into(),
            });
        }
        Ok(m)
    }

    /// Writes through a temporary file so a crash never leaves a torn manifest.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text + "\n").map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// True when the cell is recorded and its report is still on disk.
    pub fn is_complete(&self, key: &str, out_dir: &Path) -> bool {
        self.cells.get(key).is_some_and(|c| out_dir.join(&c.report).exists())
    }
}

pub fn cell_key(update: &str, strategy: &str, seed: u64) -> String {
    format!("{update}/{strategy}/{seed}")
}

use std::path::{Path, PathBuf};

use psttl::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written to `manifest.json` next to the outputs of every command. Paths
/// are recorded as given on the command line; nothing time-dependent is
/// stored, so a rerun writes the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Files written by the command, relative to `out`.
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, out: &Path) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: None,
            data: None,
            init: None,
            predictions: None,
            grid: None,
            seeds: vec![config.seed],
            out: out.to_path_buf(),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, out: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
    }

    pub fn read(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Failure::new("input", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::new("parse", format!("{}: {e}", path.display())))
    }
}

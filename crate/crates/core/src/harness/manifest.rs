use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentConfig, HarnessError};

/// Identifies the code that produced a result: package name and version.
pub fn build_id() -> String {
    let digest = Sha256::digest(format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")).as_bytes());
    format!("{}-{}", env!("CARGO_PKG_VERSION"), &hex::encode(digest)[..12])
}

/// Written next to every output; contains nothing time-dependent so reruns
/// reproduce it byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub build_id: String,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, seed: u64, outputs: Vec<String>) -> Self {
        Self { command: command.into(), config_hash: cfg.hash(), seed, build_id: build_id(), outputs, config: cfg.clone() }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

//! Run manifests: every CLI command writes one beside its outputs so a run
//! can be traced back to the exact command, config, seed, and build.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::WacaError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    /// Build identity, e.g. "waca 0.1.0".
    pub version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

impl RunManifest {
    pub fn start(command: &str, config_path: &str, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.to_string(),
            seed,
            version: version_string(),
            started_unix_s: unix_now(),
            finished_unix_s: 0,
        }
    }

    /// Stamps the finish time and writes `manifest.toml` into `out_dir`.
    pub fn finish(mut self, out_dir: &Path) -> Result<(), WacaError> {
        self.finished_unix_s = unix_now();
        let text = toml::to_string(&self).expect("manifest serializes");
        let path = out_dir.join("manifest.toml");
        std::fs::write(&path, text)
            .map_err(|e| WacaError::Io(format!("{}: {e}", path.display())))
    }
}

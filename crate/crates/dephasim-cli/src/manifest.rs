//! Run manifests: one JSON record per command invocation tying outputs to
//! the exact inputs that produced them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Provenance record written next to every run's data files. Identical
/// (command, config digest, seed, versions) imply byte-identical data
/// files; wall time is informational and excluded from that contract.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// Data files written by the run, relative to the manifest's directory,
    /// in deterministic order.
    pub output_paths: Vec<String>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("dephasim".into(), dephasim::VERSION.to_string());
        versions.insert("dephasim-cli".into(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.into(),
            config_digest_sha256: config_digest,
            seed,
            versions,
            output_paths: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn record_output(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.output_paths.push(rel.to_string_lossy().into_owned());
    }

    /// Write `manifest.json` into the output directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .expect("manifest serialization cannot fail")
            + "\n";
        std::fs::write(&path, text)
            .map_err(|e| CliError::Numeric(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

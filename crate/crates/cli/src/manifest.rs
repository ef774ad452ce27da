//! Run manifest: enough to replay a run and locate its outputs.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub mobiflow: String,
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the configuration text, hex encoded.
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub started: String,
    pub finished: Option<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn start(command: &str, config_text: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash(config_text),
            seed,
            versions: Versions {
                mobiflow: env!("CARGO_PKG_VERSION").to_string(),
                threads: rayon::current_num_threads(),
            },
            started: now(),
            finished: None,
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished = Some(now());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

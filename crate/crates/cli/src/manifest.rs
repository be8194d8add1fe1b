//! Run manifests: enough resolved context to re-execute a command and
//! reproduce its outputs bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Arguments after the binary name.
    pub command: Vec<String>,
    /// The model configuration as read from disk.
    pub resolved_config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Files written alongside this manifest.
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(argv: &[String], resolved_config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: argv.to_vec(),
            resolved_config,
            seeds,
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    /// Write `manifest.json` atomically next to the outputs.
    pub fn finish_into(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix = now_unix();
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Failure(format!("creating {}: {e}", dir.display())))?;
        let path = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Failure(format!("serializing manifest: {e}")))?;
        std::fs::write(&tmp, text)
            .map_err(|e| CliError::Failure(format!("writing {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| CliError::Failure(format!("renaming manifest: {e}")))?;
        Ok(())
    }
}

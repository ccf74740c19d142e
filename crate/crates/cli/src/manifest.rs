use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lfm_core::records::write_atomic;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
}

/// What a command ran with and what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<FileEntry>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String, started_unix_ms: u128) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            started_unix_ms,
            finished_unix_ms: 0,
            files: Vec::new(),
        }
    }

    /// Records `files`, which must exist, and writes `dir/manifest.json`
    /// in one rename.
    pub fn finish(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let meta = std::fs::metadata(f).map_err(|e| CliError::io(f, e))?;
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.files.push(FileEntry { path: rel.display().to_string(), bytes: meta.len() });
        }
        self.finished_unix_ms = now_ms();
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&self).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(&path, format!("{json}\n").as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

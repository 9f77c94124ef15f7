//! Run manifests: one JSON record per invocation, written alongside the
//! outputs, capturing the resolved flags, seed, version and timing.

use anyhow::Result;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    flags: serde_json::Value,
    seed: u64,
    version: &'a str,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    outputs: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub struct RunTimer {
    started_unix_ms: u128,
}

impl RunTimer {
    pub fn start() -> Self {
        RunTimer {
            started_unix_ms: now_ms(),
        }
    }

    /// Write the manifest next to the outputs and return its path.
    pub fn write_manifest<F: Serialize>(
        self,
        command: &str,
        flags: &F,
        seed: u64,
        outputs: &[PathBuf],
        manifest_path: &Path,
    ) -> Result<PathBuf> {
        let manifest = RunManifest {
            command,
            flags: serde_json::to_value(flags)?,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
            outputs: outputs
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect(),
        };
        std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest_path.to_path_buf())
    }
}

/// Manifest path for a command whose output is a single file.
pub fn sibling_manifest(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    output
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(format!("{stem}.manifest.json"))
}

/// Seed resolution: explicit flag wins, then the POWQ_SEED environment
/// variable, then 0.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(v) = std::env::var("POWQ_SEED") {
        if let Ok(s) = v.parse() {
            return s;
        }
    }
    0
}

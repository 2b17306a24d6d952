//! Run manifests: config echo, seed and artifact checksums.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn artifact(path: &Path, base: &Path) -> std::io::Result<Artifact> {
    let data = std::fs::read(path)?;
    let shown = path.strip_prefix(base).unwrap_or(path);
    Ok(Artifact {
        path: shown.display().to_string(),
        sha256: sha256_hex(&data),
        bytes: data.len() as u64,
    })
}

/// Hashes `artifacts` and writes the manifest to `target`.
pub fn write(target: &Path, seed: u64, config: serde_json::Value, artifacts: &[PathBuf]) -> std::io::Result<()> {
    let base = target.parent().unwrap_or(Path::new(""));
    let manifest = Manifest {
        tool: "cbf-safelayer",
        version: env!("CARGO_PKG_VERSION"),
        command: std::env::args().skip(1).collect(),
        seed,
        config,
        artifacts: artifacts
            .iter()
            .map(|p| artifact(p, base))
            .collect::<std::io::Result<_>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(target, text + "\n")
}

//! Run directories: every subcommand that writes files puts them in one
//! directory together with `run.json`, which records the effective
//! settings, their hash, the seed and the on-disk format versions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stemgen_core::dataset::MANIFEST_VERSION;
use stemgen_core::format::GRID_VERSION;
use stemgen_core::model::CHECKPOINT_VERSION;
use stemgen_core::rvq::CODEBOOK_VERSION;
use stemgen_core::Result;

pub const RUN_MANIFEST: &str = "run.json";
pub const OUTPUT_ROOT_ENV: &str = "STEMGEN_OUTPUT_ROOT";
pub const LOG_ENV: &str = "STEMGEN_LOG";

#[derive(Debug, Serialize)]
pub struct Formats {
    pub grid: u16,
    pub checkpoint: u16,
    pub codebook: u16,
    pub dataset_manifest: u32,
}

impl Formats {
    pub fn current() -> Self {
        Self {
            grid: GRID_VERSION,
            checkpoint: CHECKPOINT_VERSION,
            codebook: CODEBOOK_VERSION,
            dataset_manifest: MANIFEST_VERSION,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub formats: Formats,
    pub outputs: Vec<String>,
}

/// Hex SHA-256 of the compact JSON encoding (object keys sorted by
/// `serde_json`'s map).
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// `--out` resolved against the output root; defaults to
/// `<root>/runs/<command>`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    match (out, root) {
        (Some(p), Some(root)) if p.is_relative() => root.join(p),
        (Some(p), _) => p.to_path_buf(),
        (None, root) => root.unwrap_or_else(|| PathBuf::from(".")).join("runs").join(command),
    }
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    outputs: &[&str],
) -> Result<()> {
    let manifest = RunManifest {
        tool: "stemgen",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config_hash: config_hash(&config),
        config,
        seed,
        formats: Formats::current(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

//! Run manifests: every emitted artifact embeds or references one.
//!
//! A manifest captures the semantic configuration of a run — command,
//! tool version, seed, full argument set, and the SHA-256 of every input
//! file — so re-running it reproduces byte-identical primary outputs.
//! Execution details that cannot change results (like `--threads`) are
//! deliberately excluded.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Input path -> SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new<A: Serialize>(
        command: &str,
        seed: Option<u64>,
        args: &A,
        input_files: &[&Path],
    ) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        for path in input_files {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading input {}", path.display()))?;
            inputs.insert(
                path.display().to_string(),
                langlens::seeds::sha256_hex(&bytes),
            );
        }
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(args)?,
            inputs,
        })
    }

    /// Single-line JSON form, for CSV comment headers and checkpoint
    /// notes.
    pub fn compact(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Write a JSON artifact with the manifest merged in as a `manifest`
/// field. The artifact must serialize to a JSON object.
pub fn write_json_with_manifest<T: Serialize>(
    path: &Path,
    manifest: &RunManifest,
    artifact: &T,
) -> Result<()> {
    let mut value = serde_json::to_value(artifact)?;
    let object = value
        .as_object_mut()
        .context("artifact must serialize to a JSON object")?;
    object.insert("manifest".to_string(), serde_json::to_value(manifest)?);
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    langlens::fsio::write_atomic(path, &bytes)?;
    Ok(())
}

/// Write a CSV artifact whose first line references the manifest.
pub fn write_csv_with_manifest(path: &Path, manifest: &RunManifest, body: &str) -> Result<()> {
    let text = format!("# manifest: {}\n{body}", manifest.compact()?);
    langlens::fsio::write_atomic(path, text.as_bytes())?;
    Ok(())
}

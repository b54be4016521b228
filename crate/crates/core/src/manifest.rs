//! Run manifests: every output directory records exactly one manifest with
//! the command, config snapshot, seed and named sub-seeds, version string,
//! and content hashes of its inputs. Reruns with identical manifests
//! produce identical outputs; a directory that already holds a manifest is
//! never overwritten without `--force`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Version string stamped into manifests (package version plus an optional
/// build ref from `HIERMOE_BUILD_REF` at compile time).
pub fn version_string() -> String {
    match option_env!("HIERMOE_BUILD_REF") {
        Some(r) => format!("hiermoe-{}-{}", env!("CARGO_PKG_VERSION"), r),
        None => format!("hiermoe-{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Named sub-seed values derived from `seed`.
    pub sub_seeds: BTreeMap<String, u64>,
    /// Flat config snapshot (file entries merged with CLI overrides).
    pub config: BTreeMap<String, String>,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Files this run produces, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, sub_seed_names: &[&str]) -> Self {
        RunManifest {
            command: command.to_string(),
            version: version_string(),
            seed,
            sub_seeds: sub_seed_names
                .iter()
                .map(|n| (n.to_string(), crate::seed::sub_seed(seed, n)))
                .collect(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, entries: &BTreeMap<String, String>) -> Self {
        self.config = entries.clone();
        self
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            crate::dataset::dir_hash(path)?
        } else {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let mut h = Sha256::new();
            h.update(&bytes);
            h.finalize().iter().map(|b| format!("{b:02x}")).collect()
        };
        self.inputs.insert(label.to_string(), hash);
        Ok(())
    }
}

/// Refuses to reuse an output directory that already holds a manifest
/// unless `force` is set; creates the directory if needed.
pub fn claim_output_dir(dir: &Path, force: bool) -> Result<()> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() && !force {
        return Err(Error::data(format!(
            "{} already contains a run (manifest.json present); pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn claim_respects_existing_manifests() {
        let dir = tempfile::tempdir().unwrap();
        claim_output_dir(dir.path(), false).unwrap();
        let m = RunManifest::new("gen-data", 7, &["data", "init"]);
        write_manifest(dir.path(), &m).unwrap();
        assert!(claim_output_dir(dir.path(), false).is_err());
        claim_output_dir(dir.path(), true).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.command, "gen-data");
        assert_eq!(back.seed, 7);
        assert_eq!(back.sub_seeds.len(), 2);
        assert_eq!(back.sub_seeds["data"], crate::seed::sub_seed(7, "data"));
    }
}

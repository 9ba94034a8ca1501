//! Run manifest: the persisted identity of one benchmark run.
//!
//! Every output file in a results directory belongs to exactly one manifest;
//! a rerun against an identical manifest reproduces identical numeric output.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::BenchmarkConfig;
use crate::rng::derive_seed;

/// Seed-stream word for per-replication data generation.
pub const DATA_STREAM: u64 = 0xD0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScenario {
    pub label: String,
    /// Hex seed-stream key; independent of the replication count.
    pub family_key: String,
    pub reps: usize,
    /// Data seed per replication, in replication order.
    pub rep_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub created_unix: u64,
    pub finished_unix: Option<u64>,
    pub scenarios: Vec<ManifestScenario>,
    pub methods: Vec<String>,
    /// Canonical TOML with all defaults made explicit.
    pub effective_config: String,
}

pub fn rep_data_seed(master_seed: u64, family_key: u64, rep: usize) -> u64 {
    derive_seed(master_seed, &[DATA_STREAM, family_key, rep as u64])
}

impl RunManifest {
    pub fn new(config: &BenchmarkConfig) -> Result<RunManifest> {
        let scenarios = config
            .scenarios
            .iter()
            .map(|s| {
                let key = s.family_key();
                ManifestScenario {
                    label: s.label(),
                    family_key: format!("{key:016x}"),
                    reps: s.reps,
                    rep_seeds: (0..s.reps)
                        .map(|r| rep_data_seed(config.master_seed, key, r))
                        .collect(),
                }
            })
            .collect();
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash()?,
            master_seed: config.master_seed,
            created_unix: unix_now(),
            finished_unix: None,
            scenarios,
            methods: config.methods.iter().map(|m| m.to_string()).collect(),
            effective_config: config.canonical_toml()?,
        })
    }

    /// True when `other` reruns the same numeric work (timestamps excluded).
    pub fn same_run(&self, other: &RunManifest) -> bool {
        self.config_hash == other.config_hash
            && self.master_seed == other.master_seed
            && self.scenarios == other.scenarios
            && self.methods == other.methods
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.json")
}

/// Serializes `value` as pretty JSON and renames it into place atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("json encode: {e}")))?;
    write_bytes_atomic(path, text.as_bytes())
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().ok_or_else(|| Error::config("path has no parent".to_string()))?;
    std::fs::create_dir_all(parent)
        .map_err(|e| Error::config(format!("mkdir {}: {e}", parent.display())))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::config(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::config(format!("rename to {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> BenchmarkConfig {
        BenchmarkConfig::from_toml_str(
            r#"
master_seed = 7
methods = ["cox_ph"]

[[scenarios]]
n = 120
hs = "h1"
psi = 1.0
ph = true
censoring = { independent = { rate = 0.01 } }
reps = 4
"#,
        )
        .unwrap()
    }

    #[test]
    fn manifests_agree_across_reconstruction_and_differ_on_seed_change() {
        let a = RunManifest::new(&config()).unwrap();
        let b = RunManifest::new(&config()).unwrap();
        assert!(a.same_run(&b));
        assert_eq!(a.scenarios[0].rep_seeds.len(), 4);

        let mut other = config();
        other.master_seed = 8;
        let c = RunManifest::new(&other).unwrap();
        assert!(!a.same_run(&c));
        assert_ne!(a.scenarios[0].rep_seeds, c.scenarios[0].rep_seeds);
    }

    #[test]
    fn json_round_trip_is_atomic_and_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = manifest_path(dir.path());
        let manifest = RunManifest::new(&config()).unwrap();
        write_json_atomic(&path, &manifest).unwrap();
        let back: RunManifest = read_json(&path).unwrap();
        assert_eq!(manifest, back);
        assert!(!path.with_extension("tmp").exists());
    }
}

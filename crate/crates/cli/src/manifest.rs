//! Per-stage run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// What a stage read and wrote. Digests are SHA-256 of file bytes, keyed by
/// file name relative to the run directory. `created_unix_s` and the
/// `volatile` files (timings) are the only run-dependent content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub volatile: Vec<String>,
    pub created_unix_s: u64,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(CliError::io(format!("hashing {}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, config_hash: String) -> Manifest {
        Manifest {
            stage: stage.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            volatile: Vec::new(),
            created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn file_name(stage: &str) -> String {
        format!("manifest_{stage}.json")
    }

    pub fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(Manifest::file_name(stage))
    }

    pub fn load(dir: &Path, stage: &str) -> Result<Manifest> {
        let p = Manifest::path(dir, stage);
        let text = std::fs::read_to_string(&p).map_err(CliError::io(format!("reading {}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }

    pub fn record_input(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.inputs.insert(name.to_owned(), file_digest(&dir.join(name))?);
        Ok(())
    }

    pub fn record_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_owned(), file_digest(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = Manifest::path(dir, &self.stage);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&p, text + "\n").map_err(CliError::io(format!("writing {}", p.display())))?;
        Ok(p)
    }
}

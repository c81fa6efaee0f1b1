use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, PersistError, Result, RunConfig};

pub const MANIFEST_VERSION: u32 = 1;

/// Record of one finished command: what went in, what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    /// Effective configuration, defaults and overrides included.
    pub config: RunConfig,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub steps: usize,
    pub wall_clock_secs: f64,
    /// Command-specific outcome, e.g. final metrics.
    pub result: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, run_id: &str, config: &RunConfig) -> Self {
        RunManifest {
            version: MANIFEST_VERSION,
            command: command.into(),
            run_id: run_id.into(),
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            steps: 0,
            wall_clock_secs: 0.0,
            result: serde_json::Value::Null,
        }
    }

    /// Hashes `path` and records it under `role`.
    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_artifact(&mut self, role: &str, path: &Path) {
        self.artifacts.insert(role.into(), path.to_path_buf());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(PersistError::Version {
                found: m.version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(m)
    }
}

/// Lower-case hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

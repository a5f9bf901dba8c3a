//! `manifest.json`, written next to the outputs of every command:
//!
//! ```json
//! {
//!   "command": "eval",
//!   "argv": ["ocean", "eval", "..."],
//!   "config": { ... },
//!   "seed": 7,
//!   "input_hash": "sha256 over every input file, in read order",
//!   "inputs": ["data/test.ocds"],
//!   "outputs": ["runs/a/metrics.csv"],
//!   "started_unix": 1760000000,
//!   "finished_unix": 1760000042
//! }
//! ```

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ocean_core::Result;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(skip)]
    hasher: Sha256,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed,
            input_hash: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            hasher: Sha256::new(),
        }
    }

    /// Folds a file's name and bytes into the input hash.
    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.hasher.update(path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(&bytes);
        self.inputs.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.input_hash = format!("{:x}", self.hasher.clone().finalize());
        self.finished_unix = now();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}

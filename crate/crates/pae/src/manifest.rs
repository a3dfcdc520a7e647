//! Run manifests: enough metadata to re-execute a subcommand bit-identically.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Receipt written next to every subcommand's outputs. Input and output
/// hashes make reruns checkable: identical inputs and flags must reproduce
/// identical output hashes. Timings are informational only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub toolkit_version: String,
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub seed: u64,
    pub workers: usize,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub timing_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, workers: usize) -> Self {
        Self {
            format_version: 1,
            toolkit_version: TOOLKIT_VERSION.to_string(),
            command: command.to_string(),
            args: BTreeMap::new(),
            seed,
            workers,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            timing_ms: 0,
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.output_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialization");
        text.push('\n');
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

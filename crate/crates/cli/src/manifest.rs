//! Run manifest: what ran, on which inputs, and what it wrote. Identical
//! inputs and seed reproduce the manifest byte for byte except `timing_ms`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub config_digest: Option<String>,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub fatal_errors: Vec<String>,
    pub timing_ms: u128,
}

/// What a successful command hands back for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config_digest: Option<String>,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, jobs: usize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            jobs,
            config_digest: None,
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            fatal_errors: Vec::new(),
            timing_ms: 0,
        }
    }

    pub fn absorb(&mut self, outcome: Outcome) {
        self.config_digest = outcome.config_digest;
        self.input_digests = outcome.input_digests;
        self.outputs = outcome.outputs;
        self.warnings = outcome.warnings;
    }

    pub fn write(&self, out_dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        atomic_write(&out_dir.join("manifest.json"), &bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Write via a temp file plus rename; readers never observe partial bytes.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

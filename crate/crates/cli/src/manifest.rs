//! Run manifests: what was run, on which inputs, and what it wrote.
//!
//! The manifest hash covers the tool version, the resolved job and the
//! content hash of every input file. Output directories are not part of it,
//! and neither is the wall-clock block, so two runs of one job share a hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jobs::Job;
use crate::Failure;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    /// Git-style blob hash: SHA-256 over `"blob <len>\0" ++ contents`.
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_unix_ms: u128,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub manifest_hash: String,
    pub input_hash: String,
    pub seed: Option<u64>,
    pub job: Job,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
    pub wall_clock: WallClock,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

/// Hashes every input file; a missing file is a usage error naming it.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<InputFile>, Failure> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            Ok(InputFile {
                path: p.clone(),
                blob: blob_hash(&bytes),
            })
        })
        .collect()
}

pub fn combined_input_hash(inputs: &[InputFile]) -> String {
    let mut h = Sha256::new();
    for f in inputs {
        h.update(format!("{} {}\n", f.blob, f.path.display()).as_bytes());
    }
    hex(&h.finalize())
}

pub fn manifest_hash(job: &Job, input_hash: &str) -> String {
    let body = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "job": job,
        "input_hash": input_hash,
    });
    sha256_hex(&serde_json::to_vec(&body).expect("json value serializes"))
}

/// Identity of a job before it runs.
pub struct Stamp {
    pub manifest_hash: String,
    pub input_hash: String,
    pub inputs: Vec<InputFile>,
    started: SystemTime,
}

impl Stamp {
    pub fn new(job: &Job) -> Result<Self, Failure> {
        let inputs = hash_inputs(&job.input_files())?;
        let input_hash = combined_input_hash(&inputs);
        Ok(Self {
            manifest_hash: manifest_hash(job, &input_hash),
            input_hash,
            inputs,
            started: SystemTime::now(),
        })
    }

    /// Writes `manifest.json` listing `outputs` (relative to `dir`).
    pub fn finish(self, job: &Job, dir: &Path, outputs: &[String]) -> Result<Manifest, Failure> {
        let outputs = outputs
            .iter()
            .map(|name| {
                let p = dir.join(name);
                let bytes = fs::read(&p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
                Ok(OutputFile {
                    file: name.clone(),
                    sha256: sha256_hex(&bytes),
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            manifest_hash: self.manifest_hash,
            input_hash: self.input_hash,
            seed: job.seed(),
            job: job.clone(),
            inputs: self.inputs,
            outputs,
            wall_clock: WallClock {
                started_unix_ms: self
                    .started
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
                elapsed_secs: self.started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0),
            },
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let p = dir.join(FILE_NAME);
        fs::write(&p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
        Ok(manifest)
    }
}

pub fn load(path: &Path) -> Result<Manifest, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

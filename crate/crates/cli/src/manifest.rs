//! Run manifests: what was run, on which inputs, producing which files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Digest of command, effective config and input digests; stable
    /// across repeated runs on identical inputs.
    pub run_id: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects manifest fields over the course of one command.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    started_at: String,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    pub run_id: String,
}

impl Recorder {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, inputs: &[&Path]) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: file_digest(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(&config)?);
        h.update(seed.to_le_bytes());
        for d in &inputs {
            h.update(d.sha256.as_bytes());
        }
        let run_id = hex(&h.finalize()[..8]);
        Ok(Recorder { command: command.into(), config, seed, started_at: now(), inputs, outputs: Vec::new(), run_id })
    }

    /// Writes an output artifact and records it.
    pub fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    /// CSV artifact whose first line names the producing run.
    pub fn write_csv(&mut self, path: PathBuf, body: &[u8]) -> Result<()> {
        let mut bytes = format!("# nslfa run {}\n", self.run_id).into_bytes();
        bytes.extend_from_slice(body);
        self.write(path, &bytes)
    }

    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            run_id: self.run_id,
            command: self.command,
            args: std::env::args().collect(),
            config: self.config,
            seed: self.seed,
            started_at: self.started_at,
            finished_at: now(),
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }
}

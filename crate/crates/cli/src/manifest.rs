use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};
use vkb_core::corpus::io::write_atomic;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance of one invocation, written atomically when the command ends.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub stages: Vec<StageTime>,
    pub status: String,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let canonical = serde_json::to_vec(&config).unwrap_or_default();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_hash: sha256_hex(&canonical),
            config,
            seed,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
            status: "running".into(),
            started: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn begin(&mut self) {
        self.started = Some(Instant::now());
    }

    pub fn end(&mut self, stage: &str) {
        let seconds = self.started.take().map_or(0.0, |t| t.elapsed().as_secs_f64());
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds,
        });
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        Ok(())
    }
}

/// `<output>.manifest.json`, or `vkb-run.manifest.json` in the working
/// directory for commands without an output file.
pub fn default_path(output: Option<&Path>) -> PathBuf {
    match output {
        Some(p) => {
            let mut s = p.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
        None => PathBuf::from("vkb-run.manifest.json"),
    }
}

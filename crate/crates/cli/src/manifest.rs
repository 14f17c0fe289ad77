//! `manifest.json`: what ran, with which configuration, on what inputs,
//! and the checksum of everything it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Full configuration after flag overrides.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output: PathBuf,
    pub schema_hash: Option<String>,
    /// Output-relative path → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn begin(command: &str, config: Value, output: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            output: output.to_path_buf(),
            schema_hash: None,
            artifacts: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.to_path_buf());
        self
    }

    /// Checksums `files` (relative to the output directory) and writes the
    /// manifest next to them.
    pub fn finish(mut self, files: &[String]) -> Result<Self> {
        for f in files {
            let h = sha256_file(&self.output.join(f))?;
            self.artifacts.insert(f.clone(), h);
        }
        self.finished_unix_ms = now_ms();
        let path = self.output.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Upstream {
            path: path.clone(),
            reason: format!("cannot read manifest ({e}); run the upstream stage first"),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads the manifest of an upstream stage and checks its command,
    /// schema hash and artifact checksums.
    pub fn upstream(dir: &Path, command: &str, schema_hash: Option<&str>) -> Result<Self> {
        let m = Self::read(dir)?;
        let path = dir.join(MANIFEST_FILE);
        if m.command != command {
            return Err(CliError::Upstream {
                path,
                reason: format!("expected output of `{command}`, found `{}`", m.command),
            });
        }
        if let Some(want) = schema_hash {
            if m.schema_hash.as_deref() != Some(want) {
                return Err(CliError::Upstream {
                    path,
                    reason: format!(
                        "schema hash {} does not match {want}",
                        m.schema_hash.as_deref().unwrap_or("<none>")
                    ),
                });
            }
        }
        for (file, want) in &m.artifacts {
            let got = sha256_file(&dir.join(file))?;
            if &got != want {
                return Err(CliError::Upstream {
                    path: dir.join(file),
                    reason: "checksum differs from the manifest".into(),
                });
            }
        }
        Ok(m)
    }
}

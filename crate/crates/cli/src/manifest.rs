//! JSON-lines run manifests.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// One manifest record, appended as a single JSON line.
pub struct Record {
    pub command: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    pub metrics: Map<String, Value>,
}

impl Record {
    pub fn new(command: &'static str, cfg: Option<&RunConfig>) -> Self {
        let config = cfg.map_or(Value::Null, |c| {
            Value::Object(c.entries.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect())
        });
        Self {
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: Map::new(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    pub fn metric(&mut self, key: &str, v: impl Into<Value>) {
        self.metrics.insert(key.to_string(), v.into());
    }

    fn checksums(paths: &[PathBuf]) -> Result<Value, CliError> {
        let mut m = Map::new();
        for p in paths {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            m.insert(name, Value::String(sha256_file(p)?));
        }
        Ok(Value::Object(m))
    }

    /// Appends the record; `error` marks it failed.
    pub fn write(&self, path: &Path, error: Option<&CliError>) -> Result<(), CliError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let outputs = if error.is_some() {
            Value::Object(Map::new())
        } else {
            Self::checksums(&self.outputs)?
        };
        let line = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "status": if error.is_some() { "failed" } else { "ok" },
            "error": error.map(|e| e.to_string()),
            "timestamp": timestamp,
            "config": self.config,
            "inputs": Self::checksums(&self.inputs)?,
            "outputs": outputs,
            "metrics": self.metrics,
        });
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

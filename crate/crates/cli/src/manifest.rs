//! Run manifests: the resolved configuration and the content hashes of
//! every input, written next to a command's outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash (`blob <len>\0<content>`, SHA-256) of a file.
pub fn content_hash(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<Input>,
    outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), String> {
        let sha256 = content_hash(path).map_err(|e| format!("cannot hash {}: {e}", path.display()))?;
        self.inputs.push(Input {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<stem>.manifest.json` beside `primary` (or `manifest.json`
    /// inside it when `primary` is a directory).
    pub fn write_beside(&self, primary: &Path) -> Result<PathBuf, String> {
        let path = if primary.is_dir() {
            primary.join("manifest.json")
        } else {
            let stem = primary.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            primary.with_file_name(format!("{stem}.manifest.json"))
        };
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        Ok(path)
    }
}

//! Provenance record written beside every command's outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Hex SHA-256 of `"blob <len>\0" + content`, the object hash git computes
/// for a file in a SHA-256 repository.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// The path as given on the command line, or a description of a
    /// generated input such as `synthetic corpus`.
    pub name: String,
    pub bytes: u64,
    pub hash: String,
}

impl InputDigest {
    pub fn of_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        InputDigest {
            name: name.into(),
            bytes: bytes.len() as u64,
            hash: content_hash(bytes),
        }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::of_bytes(path.display().to_string(), &bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    /// The fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Output file names, relative to the manifest's directory.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, digest: InputDigest) {
        self.inputs.push(digest);
    }

    pub fn output(&mut self, path: &Path) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.push(name);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::formats::write_json(path, self)
    }
}

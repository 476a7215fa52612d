//! Run manifest: inputs and outputs with their SHA-256 digests.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_SCHEMA: &str = "metais-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub status: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            status: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Records a file already written under the output directory.
    pub fn output(&mut self, out_dir: &Path, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        let rel: PathBuf = path.strip_prefix(out_dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf());
        self.outputs.retain(|e| e.path != rel.display().to_string());
        self.outputs.push(FileEntry { path: rel.display().to_string(), sha256 });
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

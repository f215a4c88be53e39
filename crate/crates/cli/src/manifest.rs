//! Run manifests: `manifest.json` in every output directory, recording
//! what produced the directory and hashes of its inputs and artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Path as given (inputs) or relative to the run directory (artifacts).
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Effective argument list, config-file values included.
    pub argv: Vec<String>,
    /// Parsed options with defaults filled in.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String, cgnnse::Error> {
    let bytes = std::fs::read(path).map_err(|e| cgnnse::Error::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).expect("options serialize"),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<(), cgnnse::Error> {
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest there.
    pub fn write(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf, cgnnse::Error> {
        self.artifacts.clear();
        for f in files {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.artifacts.push(FileHash {
                path: rel.display().to_string(),
                sha256: sha256_file(&dir.join(rel))?,
            });
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| cgnnse::Error::Input(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, cgnnse::Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| cgnnse::Error::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| cgnnse::Error::Input(format!("{}: {e}", path.display())))
    }

    /// Re-hashes the artifacts next to the manifest at `path`; returns the
    /// ones that are missing or changed.
    pub fn verify(&self, path: &Path) -> Vec<String> {
        let dir = path.parent().unwrap_or(Path::new("."));
        self.artifacts
            .iter()
            .filter(|a| sha256_file(&dir.join(&a.path)).ok().as_deref() != Some(a.sha256.as_str()))
            .map(|a| a.path.clone())
            .collect()
    }
}

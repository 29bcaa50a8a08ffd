use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fail::CliResult;

/// SHA-256 of `blob <len>\0<bytes>`, the object hash a SHA-256 git
/// repository would assign the file.
pub fn git_blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Hashes every regular file directly inside `dir`, sorted by name.
pub fn hash_dir(dir: &Path) -> CliResult<Vec<FileHash>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                sha256: git_blob_sha256(&fs::read(&p)?),
                path: p.display().to_string(),
            })
        })
        .collect()
}

pub fn hash_file(path: &Path) -> CliResult<FileHash> {
    Ok(FileHash {
        sha256: git_blob_sha256(&fs::read(path)?),
        path: path.display().to_string(),
    })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            seed: None,
            inputs: Vec::new(),
            artifacts: BTreeMap::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.artifacts
            .insert(name.into(), path.display().to_string());
    }

    pub fn write(mut self, dir: &Path, started: Instant) -> CliResult<PathBuf> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }
}

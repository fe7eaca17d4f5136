//! Run directories and their manifests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the resolved config as written to `config.json`.
    pub config_sha256: String,
    pub resolved_config: serde_json::Value,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub exit_status: i32,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

/// A fresh directory `<root>/<command>-NNNN`. Existing directories are
/// never reused, so a run cannot touch another run's files.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    started: f64,
    files: Vec<FileEntry>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        for k in 1..100_000u32 {
            let path = root.join(format!("{command}-{k:04}"));
            match fs::create_dir(&path) {
                Ok(()) => {
                    return Ok(Self {
                        path,
                        command: command.to_string(),
                        started: unix_now(),
                        files: Vec::new(),
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::other(format!("no free run directory under {}", root.display())))
    }

    /// Write a new file; refuses to replace an existing one.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> io::Result<PathBuf> {
        let path = self.path.join(name);
        let mut file = fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
        file.write_all(contents)?;
        file.sync_all()?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(
        self,
        config_json: &str,
        threads: usize,
        exit_status: i32,
        error: Option<String>,
    ) -> io::Result<RunManifest> {
        let manifest = RunManifest {
            tool: "unichaos".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            resolved_config: serde_json::from_str(config_json).unwrap_or(serde_json::Value::Null),
            threads,
            started_unix: self.started,
            finished_unix: unix_now(),
            exit_status,
            error,
            files: self.files.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)? + "\n";
        let mut file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.path.join(MANIFEST))?;
        file.write_all(text.as_bytes())?;
        Ok(manifest)
    }
}

/// Re-hash every file listed in `dir/manifest.json`; returns the names
/// whose content no longer matches.
pub fn verify_manifest(dir: &Path) -> io::Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(io::Error::other)?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        match fs::read(dir.join(&f.path)) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 && bytes.len() as u64 == f.bytes => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}

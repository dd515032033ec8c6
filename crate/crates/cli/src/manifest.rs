use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance for one invocation. Timestamps differ between reruns; the
/// config hash and every file hash do not.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn is_run_manifest(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n == "manifest.json" || n.ends_with(".manifest.json"))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, config: &serde_json::Value, seeds: Vec<u64>, threads: Option<usize>, started: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: sha256_hex(config.to_string().as_bytes()),
            seeds,
            threads,
            started_unix: started,
            finished_unix: 0,
            files: Vec::new(),
        }
    }

    /// Hash `only` (or every file under `dir` except manifests) and write
    /// the manifest to `dir/<file_name>`. Paths are stored relative to `dir`.
    pub fn finish(mut self, dir: &Path, file_name: &str, only: Option<&[PathBuf]>) -> std::io::Result<PathBuf> {
        let target = dir.join(file_name);
        let mut paths = match only {
            Some(files) => files.to_vec(),
            None => {
                let mut all = Vec::new();
                collect(dir, &mut all)?;
                all
            }
        };
        paths.retain(|p| p != &target && !is_run_manifest(p));
        paths.sort();
        self.files = paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p)?;
                Ok(FileEntry {
                    path: p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<std::io::Result<_>>()?;
        self.finished_unix = now_unix();
        fs::write(&target, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(target)
    }
}

//! Run manifests: every command records what it was asked to do, what it
//! resolved that to, and a content hash of every file it wrote. A rerun
//! with the same binary and arguments must reproduce the output hashes;
//! only the timestamps may differ.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use topgap_core::{Error, Result};

#[derive(Serialize)]
pub struct OutputEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration after config-file and flag merging.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub build_id: String,
    pub threads: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<OutputEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Accumulates output paths while a command runs, then hashes them into
/// the manifest on [`Recorder::finish`].
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    threads: usize,
    started_unix: u64,
    out_dir: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: Vec<u64>, threads: usize, out_dir: &Path) -> Result<Self> {
        Ok(Recorder {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            threads,
            started_unix: unix_now(),
            out_dir: out_dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn add(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn add_all(&mut self, paths: &[PathBuf]) {
        self.outputs.extend_from_slice(paths);
    }

    /// Hashes every recorded file and writes `run_manifest.json` into the
    /// output directory. The manifest never lists itself.
    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let meta = std::fs::metadata(p)?;
            let rel = p
                .strip_prefix(&self.out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/");
            outputs.push(OutputEntry {
                path: rel,
                bytes: meta.len(),
                sha256: sha256_file(p)?,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            build_id: env!("TOPGAP_BUILD_ID").to_string(),
            threads: self.threads,
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            outputs,
        };
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(Error::Io)?;
        Ok(path)
    }
}

/// Recursively lists the files under `root` in sorted order.
pub fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

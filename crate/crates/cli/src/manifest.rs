use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use slowfast::config::SlowfastConfig;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: SlowfastConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests for a file, or for every file directly inside a directory.
pub fn digests(path: &Path) -> Result<Vec<FileDigest>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| Ok(FileDigest { sha256: sha256_file(&p)?, path: p }))
            .collect()
    } else {
        Ok(vec![FileDigest {
            sha256: sha256_file(path)?,
            path: path.to_path_buf(),
        }])
    }
}

impl RunManifest {
    pub fn new(command: &str, config: SlowfastConfig, config_path: Option<PathBuf>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config_path,
            config,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.extend(digests(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.extend(digests(path)?);
        Ok(())
    }

    /// Writes to `explicit`, else `<out>.manifest.json`, else stderr.
    pub fn finish(mut self, explicit: Option<&Path>, out: Option<&Path>) -> Result<()> {
        self.finished_at = now();
        let text = serde_json::to_string_pretty(&self)?;
        let target = explicit.map(Path::to_path_buf).or_else(|| {
            out.map(|o| {
                let mut name = o.as_os_str().to_owned();
                name.push(".manifest.json");
                PathBuf::from(name)
            })
        });
        match target {
            Some(p) => fs::write(&p, text + "\n").with_context(|| format!("writing manifest {}", p.display())),
            None => {
                eprintln!("{text}");
                Ok(())
            }
        }
    }
}

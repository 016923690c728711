//! Provenance record written next to every output file.

use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use compatkit::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<FileDigest>,
    pub output: FileDigest,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(FileDigest { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Tracks the inputs of one run and writes `<out>.manifest.json`.
pub struct Recorder {
    subcommand: &'static str,
    started: DateTime<Utc>,
    inputs: Vec<FileDigest>,
}

impl Recorder {
    pub fn start(subcommand: &'static str) -> Self {
        Recorder { subcommand, started: Utc::now(), inputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if !self.inputs.iter().any(|d| d.path == path) {
            self.inputs.push(digest(path)?);
        }
        Ok(())
    }

    pub fn finish<C: Serialize>(self, config: &C, out: &Path) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            config: serde_json::to_value(config)?,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            inputs: self.inputs,
            output: digest(out)?,
        };
        let mut path = out.as_os_str().to_owned();
        path.push(".manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", Path::new(&path).display())))
    }
}

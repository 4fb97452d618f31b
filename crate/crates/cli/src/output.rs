//! Provenance-stamped artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use codelayers::report::{csv_string, write_json};

pub const ARTIFACT_VERSION: &str = concat!("codelayers ", env!("CARGO_PKG_VERSION"));

/// Marker carried by every wall-clock field.
pub const TIMING_NOTE: &str = "noisy: wall-clock seconds, excluded from reproducibility hashing";

/// Envelope of every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub result: T,
}

/// Where and under which provenance a command writes.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl Outputs {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&self, name: &str, result: &T) -> Result<PathBuf> {
        let path = self.path(name);
        let a = Artifact {
            artifact_version: ARTIFACT_VERSION.to_string(),
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            seeds: self.seeds.clone(),
            result,
        };
        write_json(&path, &a).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// CSV preceded by one `#` provenance line.
    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let text = format!(
            "# artifact_version={} command={} config_hash={} seeds={}\n{}",
            ARTIFACT_VERSION,
            self.command,
            self.config_hash,
            seeds.join(";"),
            csv_string(header, rows)
        );
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<Artifact<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Header and rows of a CSV written by [`Outputs::csv`]; `#` lines are
/// skipped. Quoted cells are not expected in our tables.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = split(lines.next().ok_or_else(|| anyhow!("{}: no header", path.display()))?);
    Ok((header, lines.map(split).collect()))
}

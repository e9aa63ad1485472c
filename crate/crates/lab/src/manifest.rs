// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeed {
    pub stage: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed { stage: String, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    /// SHA-256 of the resolved config as compact JSON, output directory excluded.
    pub config_hash: String,
    pub toolkit_version: String,
    pub master_seed: u64,
    pub seeds: Vec<StageSeed>,
    /// Stages that finished, in order.
    pub stages: Vec<String>,
    #[serde(flatten)]
    pub status: RunStatus,
    pub deterministic: bool,
    pub wall_clock_secs: f64,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn checksum(&self, path: &str) -> Option<&str> {
        self.outputs.iter().find(|o| o.path == path).map(|o| o.sha256.as_str())
    }
}

/// Writes files under one root and records their checksums. Paths that would
/// leave the root are refused.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `rel` inside the root without touching the filesystem.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            bail!("output path {rel:?} must be relative and stay inside the output directory");
        }
        Ok(self.root.join(p))
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(rel, bytes);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Records a file some other writer already produced under the root.
    pub fn adopt(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.path(rel)?)?;
        self.record(rel, &bytes);
        Ok(())
    }

    fn record(&mut self, rel: &str, bytes: &[u8]) {
        self.files.retain(|f| f.path != rel);
        self.files.push(OutputFile { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn writes_stay_inside_the_root() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        for bad in ["../x", "/etc/x", "a/../../x", "", "./x"] {
            assert!(out.write(bad, b"x").is_err(), "{bad}");
        }
        out.write("sub/a.txt", b"hello").unwrap();
        out.write("sub/a.txt", b"hello!").unwrap();
        assert_eq!(out.files().len(), 1);
        assert_eq!(out.files()[0].bytes, 6);
        assert_eq!(fs::read(dir.path().join("sub/a.txt")).unwrap(), b"hello!");
    }
}

//! Run manifests: everything needed to regenerate a result directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub jobs: usize,
    /// Command-specific facts such as the reconstruction method.
    pub facts: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// The configuration text exactly as read.
    pub config: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digest(path: &Path, relative_to: Option<&Path>) -> Result<FileDigest> {
    let shown = relative_to
        .and_then(|r| path.strip_prefix(r).ok())
        .unwrap_or(path);
    Ok(FileDigest {
        path: shown.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl Manifest {
    pub fn new(command: &str, seed: u64, jobs: usize, config: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            jobs,
            facts: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: config.to_string(),
        }
    }

    pub fn fact(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.facts.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(digest(path, None)?);
        Ok(self)
    }

    /// Records every regular file under `dir` except the manifest itself.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect(dir, &mut files)?;
        files.sort();
        for f in files {
            if f.file_name().is_some_and(|n| n == MANIFEST_NAME) {
                continue;
            }
            self.outputs.push(digest(&f, Some(dir))?);
        }
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, toml::to_string(&self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
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

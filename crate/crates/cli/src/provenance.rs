//! `provenance.json`: what produced the files in an output directory.

use std::path::Path;

use anyhow::{Context, Result};
use keratome_core::hash::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl Provenance {
    pub fn new(command: &str, args: &[String], config: &RunConfig, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: config.hash()?,
            config: config.clone(),
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn fingerprint(path: &Path) -> Result<Artifact> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Artifact { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Self::fingerprint(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Self::fingerprint(path)?);
        Ok(())
    }

    /// Writes the manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

//! Run manifest: everything needed to rerun a command and compare its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{OutputFormat, RunConfig};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    /// SHA-256 of the effective configuration's canonical TOML.
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub tolerances: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, String>,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    /// Seconds per stage; the only field that differs between identical runs.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash()?,
            config: config.clone(),
            seeds: BTreeMap::new(),
            tolerances: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Writes report files into the output directory and records them in the manifest.
pub struct OutputSink {
    dir: PathBuf,
    formats: Vec<OutputFormat>,
    pub manifest: RunManifest,
}

impl OutputSink {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let dir = config.outputs.directory.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, formats: config.outputs.formats.clone(), manifest: RunManifest::new(command, config)? })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.wants(OutputFormat::Json) {
            return Ok(());
        }
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// CSV produced by `fill` into a buffer.
    pub fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        if !self.wants(OutputFormat::Csv) {
            return Ok(());
        }
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    /// Writes the effective configuration and the manifest; returns the manifest path.
    pub fn finish(mut self) -> Result<PathBuf> {
        let cfg = self.manifest.config.to_toml()?;
        self.write(CONFIG_FILE, cfg.as_bytes())?;
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

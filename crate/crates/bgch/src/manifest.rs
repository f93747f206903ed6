//! Run manifests. Every output directory gets exactly one `manifest.toml`
//! recording the resolved config, seed, input hashes, artifact paths, and
//! tool version. Nothing time-dependent goes in, so identical runs produce
//! byte-identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ConfigSnapshot;
use crate::error::{io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub subcommand: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigSnapshot>,
    /// Input path -> "sha256:<hex>". BTreeMap keeps key order stable.
    pub inputs: BTreeMap<String, String>,
    /// Artifact role -> file name relative to the manifest's directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        RunManifest {
            tool: format!("bgch {}", env!("CARGO_PKG_VERSION")),
            subcommand: subcommand.to_string(),
            seed,
            config: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, snapshot: ConfigSnapshot) -> Self {
        self.config = Some(snapshot);
        self
    }

    /// Hashes an input file and records it under its display path.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), format!("sha256:{digest}"));
        Ok(())
    }

    pub fn record_artifact(&mut self, role: &str, file_name: &str) {
        self.artifacts.insert(role.to_string(), file_name.to_string());
    }

    /// Serializes into `dir/manifest.toml`, creating the directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        fs::write(&path, text).map_err(io_err(path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        crate::io::require_input(&path)?;
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        toml::from_str(&text)
            .map_err(|e| Error::Format { path, reason: e.to_string() })
    }

    /// Short fingerprint of the resolved config, used to tag metric reports.
    pub fn config_fingerprint(&self) -> String {
        let text = self
            .config
            .as_ref()
            .map(|c| toml::to_string(c).unwrap_or_default())
            .unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

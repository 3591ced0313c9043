//! Run manifests: every primary output gets a `<path>.manifest.json` sidecar
//! recording the command, its effective flags, seeds, and content hashes of
//! the inputs.  Reruns with equal manifests produce bit-identical outputs, so
//! the manifest doubles as a provenance key (no timestamps).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    pub version: &'static str,
}

#[derive(Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            args: BTreeMap::new(),
            inputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.into(), value.to_string());
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: format!("{digest:x}"),
        });
        Ok(self)
    }

    /// Writes the sidecar next to the primary output.
    pub fn write_for(&self, primary: &Path) -> Result<()> {
        let mut sidecar = primary.as_os_str().to_owned();
        sidecar.push(".manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&sidecar, json).context("writing manifest sidecar")?;
        Ok(())
    }
}

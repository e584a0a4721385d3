use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Everything that determines a command's output. Two runs with equal
/// manifests produce byte-identical outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Input path to sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// `builtin:<name>` or the spec file path.
    pub hardware: String,
    pub hardware_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub parameters: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, hardware: String, hardware_digest: String) -> Self {
        RunManifest {
            command: command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            inputs: BTreeMap::new(),
            hardware,
            hardware_digest,
            seed: None,
            parameters: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Reads an input file, recording its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), digest(text.as_bytes()));
        Ok(text)
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.parameters.insert(key.to_owned(), value.to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        digest(&canonical)
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub manifest: &'a RunManifest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<T>,
}

pub fn envelope<'a, T: Serialize>(manifest: &'a RunManifest, result: Option<T>) -> Envelope<'a, T> {
    Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        manifest_hash: manifest.hash(),
        manifest,
        result,
    }
}

/// `plot.csv` gets `plot.csv.manifest.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content() {
        let mut a = RunManifest::new("predict", "builtin:A100".into(), digest(b"x"));
        let b = a.clone();
        assert_eq!(a.hash(), b.hash());
        a.param("alloc", "0.5,1,1,1");
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar_path(Path::new("out/plot.csv")), Path::new("out/plot.csv.manifest.json"));
    }
}

//! Run manifests: every command records its full configuration, seeds, and
//! input digests beside its outputs, so identical inputs reproduce identical
//! artifacts and any run can be replayed from its manifest alone. Manifests
//! carry no timestamps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// The literal invocation arguments (the replay recipe).
    pub argv: Vec<String>,
    /// Effective configuration after defaulting, flag by flag.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Input path -> sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Outputs written by the run (relative to the invocation).
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: BTreeMap::new(),
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write pretty JSON beside the primary output.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Manifest path convention: `<output>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}

/// Hex sha256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_bytes(&bytes))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_are_byte_stable() {
        let mut m = RunManifest::new("train", &["--seed".into(), "7".into()]);
        m.set("epochs", 200);
        m.seed = Some(7);
        let a = serde_json::to_vec_pretty(&m).unwrap();
        let b = serde_json::to_vec_pretty(&m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join("vrdkit_manifest_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("out.tsv.manifest.json");
        let mut m = RunManifest::new("build-kg", &[]);
        m.set("top_k", "all");
        m.write(&path).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn manifest_path_convention() {
        assert_eq!(
            manifest_path_for(Path::new("/tmp/x/kg.tsv")),
            PathBuf::from("/tmp/x/kg.tsv.manifest.json")
        );
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

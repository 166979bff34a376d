//! Sidecar metadata tying every stage output to the config that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Written next to a stage's outputs as `<stage>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: String,
    /// Hash of the config sections this stage and its upstream stages read.
    pub config_hash: String,
    /// Content hash of each upstream stage at the time this one ran.
    pub upstream: BTreeMap<String, String>,
    /// Output path (relative to the root) → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl StageMeta {
    /// Digest of the outputs, which downstream stages record.
    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.outputs).expect("map serialises"))
    }

    pub fn path(dir: &Path, stage: &str) -> PathBuf {
        dir.join(format!("{stage}.meta.json"))
    }

    pub fn read(path: &Path) -> Result<Option<Self>> {
        match std::fs::read(path) {
            Ok(b) => Ok(Some(serde_json::from_slice(&b)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Every listed output still exists with the recorded bytes.
    pub fn outputs_intact(&self, root: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(rel, h)| hash_file(&root.join(rel)).is_ok_and(|cur| &cur == h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn meta_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "x").unwrap();
        let meta = StageMeta {
            stage: "s".into(),
            config_hash: "c".into(),
            upstream: BTreeMap::new(),
            outputs: [("a.txt".to_string(), sha256_hex(b"x"))].into(),
        };
        let p = StageMeta::path(dir.path(), "s");
        assert_eq!(StageMeta::read(&p).unwrap(), None);
        meta.write(&p).unwrap();
        assert_eq!(StageMeta::read(&p).unwrap(), Some(meta.clone()));
        assert!(meta.outputs_intact(dir.path()));
        std::fs::write(dir.path().join("a.txt"), "y").unwrap();
        assert!(!meta.outputs_intact(dir.path()));
    }
}

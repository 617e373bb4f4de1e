//! Append-only run manifest: one JSON record per command.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub command: String,
    pub seed: u64,
    /// Resolved configuration the command ran with.
    pub config: serde_json::Value,
    pub results: serde_json::Value,
    /// Output file name (relative to the run directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug)]
pub struct Manifest {
    dir: PathBuf,
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Manifest {
        Manifest { dir: dir.into() }
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(FILE_NAME)
    }

    /// Hashes the named artifacts and appends the record.
    pub fn append(
        &self,
        command: &str,
        seed: u64,
        config: serde_json::Value,
        results: serde_json::Value,
        artifacts: &[&str],
    ) -> Result<ManifestRecord> {
        let mut hashes = BTreeMap::new();
        for name in artifacts {
            hashes.insert(name.to_string(), file_sha256(&self.dir.join(name))?);
        }
        let record = ManifestRecord {
            command: command.into(),
            seed,
            config,
            results,
            artifacts: hashes,
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&record).expect("serializable");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        Ok(record)
    }

    pub fn read(&self) -> Result<Vec<ManifestRecord>> {
        let path = self.path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e.to_string()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let m = Manifest::new(dir.path());
        m.append("x", 1, serde_json::json!({"k": 1}), serde_json::json!(null), &["a.txt"]).unwrap();
        m.append("y", 2, serde_json::json!({}), serde_json::json!([1.5]), &[]).unwrap();
        let recs = m.read().unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(
            recs[0].artifacts["a.txt"],
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert!(m.append("z", 0, serde_json::json!({}), serde_json::json!({}), &["missing"]).is_err());
    }
}

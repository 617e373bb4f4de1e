//! Binary checkpoint bundle.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter's values as little-endian `f64` in store
//! order, followed by AdamW first and second moments when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PVCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamWConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
    checksum: String,
    optimizer: Option<OptimizerEntry>,
}

/// A model's parameters plus free-form metadata (configs, vocab, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Bundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(id, name, t)| ParamEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    decay: self.params.decays(id),
                })
                .collect(),
            checksum: self.params.checksum(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                config: o.config,
                step: o.steps_taken(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 8 * self.params.count() * 3 + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, _, t) in self.params.iter() {
            put(t);
        }
        if let Some(o) = &self.optimizer {
            let (m, v) = o.moments();
            m.iter().chain(v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bundle> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint bundle (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported bundle version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut cursor = 20 + hlen;
        let mut take = |rows: usize, cols: usize| -> Result<Tensor> {
            let n = rows * cols * 8;
            let chunk = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated parameter data"))?;
            cursor += n;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let mut params = ParamStore::new();
        for p in &header.params {
            let t = take(p.rows, p.cols)?;
            params.add(p.name.clone(), t, p.decay);
        }
        if params.checksum() != header.checksum {
            return Err(bad("parameter checksum mismatch"));
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut m = Vec::with_capacity(header.params.len());
                let mut v = Vec::with_capacity(header.params.len());
                for p in &header.params {
                    m.push(take(p.rows, p.cols)?);
                }
                for p in &header.params {
                    v.push(take(p.rows, p.cols)?);
                }
                Some(AdamW::from_state(o.config, o.step, m, v))
            }
        };
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after bundle"));
        }
        Ok(Bundle {
            kind: header.kind,
            meta: header.meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Bundle> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Bundle::from_bytes(&bytes)
    }

    /// Reads only the header's parameter checksum.
    pub fn peek_checksum(path: impl AsRef<Path>) -> Result<String> {
        Ok(Bundle::load(path)?.params.checksum())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

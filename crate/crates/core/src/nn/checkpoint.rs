//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset        | size         | content                                   |
//! |---------------|--------------|-------------------------------------------|
//! | 0             | 8            | magic `DFLRCKPT`                          |
//! | 8             | 4            | format version (`u32`, currently 1)       |
//! | 12            | 8            | header length `n` (`u64`)                 |
//! | 20            | n            | UTF-8 JSON header, see [`Header`]         |
//! | 20 + n        | rest         | concatenated `f32` array payloads         |
//!
//! The header lists every array with its name, shape and byte range inside
//! the payload, the model kind, an echo of the configuration that produced
//! it, free-form `extras`, and the SHA-256 content hash of the parameters as
//! computed by [`ParamStore::content_hash`]. Arrays appear in name order and
//! JSON objects have sorted keys, so equal models produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFLRCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub content_hash: String,
    pub config: serde_json::Value,
    pub extras: BTreeMap<String, serde_json::Value>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        store: &ParamStore,
        config: serde_json::Value,
        extras: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let arrays = store.snapshot()?;
        let mut offset = 0;
        let entries = arrays
            .iter()
            .map(|(name, shape, data)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: shape.clone(),
                    offset,
                    nbytes: data.len() * 4,
                };
                offset += e.nbytes;
                e
            })
            .collect();
        Ok(Self {
            header: Header {
                kind: kind.to_string(),
                content_hash: store.content_hash()?,
                config,
                extras,
                arrays: entries,
            },
            arrays,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.header.arrays.iter().map(|a| a.nbytes).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            if a.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", a.dtype)));
            }
            let raw = payload
                .get(a.offset..a.offset + a.nbytes)
                .ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            if data.len() != a.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("array `{}` length disagrees with shape", a.name)));
            }
            arrays.push((a.name.clone(), a.shape.clone(), data));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.header.kind
            )));
        }
        Ok(())
    }

    /// Loads the arrays into `store` and verifies the recorded content hash.
    pub fn restore_into(&self, store: &ParamStore) -> Result<()> {
        store.restore(&self.arrays)?;
        let h = store.content_hash()?;
        if h != self.header.content_hash {
            return Err(Error::Integrity(format!(
                "checkpoint `{}` hash mismatch: header {}, restored {h}",
                self.header.kind, self.header.content_hash
            )));
        }
        Ok(())
    }

    pub fn extra<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .extras
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

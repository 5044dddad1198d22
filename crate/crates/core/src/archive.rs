//! Weight archive reader/writer.
//!
//! Layout:
//!
//! ```text
//! 0..8        magic b"LTDW0001"
//! 8..16       header length H, u64 little-endian
//! 16..16+H    UTF-8 JSON header
//! 16+H..      payload: raw little-endian f32 data
//! ```
//!
//! The header is `{"config": {...}, "norm": {"mean": [..], "std": [..]},
//! "tensors": {name: {"dtype": "f32", "shape": [..], "offset": O, "len": L}}}`
//! where `offset` and `len` count bytes relative to the payload start.
//! Backbones, detector heads and training checkpoints all use this format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ArchiveError, LtdError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LTDW0001";

/// Per-channel input normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Value,
    #[serde(default)]
    norm: Option<NormConstants>,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Decoded archive contents. Tensors are kept in name order.
#[derive(Clone, Debug)]
pub struct Archive {
    pub config: Value,
    pub norm: Option<NormConstants>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(config: Value, norm: Option<NormConstants>) -> Self {
        Archive {
            config,
            norm,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        let mut t = t.clone();
        t.requires_grad = false;
        self.tensors.insert(name.into(), t);
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>, ArchiveError> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(ArchiveError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Fails if any tensor was not consumed by [`Archive::take`].
    pub fn expect_consumed(&self, prefix: &str) -> Result<(), ArchiveError> {
        match self.tensors.keys().find(|k| k.starts_with(prefix)) {
            Some(k) => Err(ArchiveError::UnexpectedTensor(k.clone())),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: payload.len() - offset,
                },
            );
        }
        let header = Header {
            config: self.config.clone(),
            norm: self.norm.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| LtdError::Validation(format!("cannot encode archive header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 8 {
            return Err(ArchiveError::Truncated("file shorter than magic".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(ArchiveError::Truncated("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| ArchiveError::Truncated(format!("header of {hlen} bytes")))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| ArchiveError::Header(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            if entry.dtype != "f32" {
                return Err(ArchiveError::UnsupportedDtype {
                    name,
                    dtype: entry.dtype,
                });
            }
            let numel: usize = entry.shape.iter().product();
            if entry.len != numel * 4 || entry.shape.contains(&0) {
                return Err(ArchiveError::Header(format!(
                    "tensor {name}: {} bytes for shape {:?}",
                    entry.len, entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| ArchiveError::Truncated(format!("payload of tensor {name}")))?;
            let data: Vec<f32> = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(ArchiveError::NonFinite(name));
            }
            let t = Tensor::new(entry.shape, data).map_err(|e| ArchiveError::Header(format!("tensor {name}: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Archive {
            config: header.config,
            norm: header.norm,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LtdError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| LtdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LtdError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// SHA-256 over (name, shape, little-endian data) of every tensor, in name order.
pub fn content_hash<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    let mut sorted: Vec<_> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

//! Versioned binary container for parameters and optimizer state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (metadata plus a tensor table), then every tensor's values as
//! little-endian `f64` in table order. All writes go through a temporary file
//! followed by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::SgdState;
use crate::params::{hex, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MLCLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn fingerprint_of<S: Serialize>(value: &S) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&json)))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_store<T: Real>(&mut self, group: &str, store: &ParamStore<T>) {
        for e in store.entries() {
            self.tensors.push((
                TensorEntry {
                    group: group.to_string(),
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                },
                e.value.to_f64_vec(),
            ));
        }
    }

    pub fn push_optimizer<T: Real>(&mut self, group: &str, store: &ParamStore<T>, state: &SgdState<T>) {
        for (e, v) in store.entries().iter().zip(&state.velocity) {
            if let Some(v) = v {
                self.tensors.push((
                    TensorEntry {
                        group: format!("{group}.velocity"),
                        name: e.name.clone(),
                        shape: v.shape().to_vec(),
                        trainable: false,
                    },
                    v.to_f64_vec(),
                ));
            }
        }
    }

    /// Named tensors of one group, in stored order.
    pub fn group<T: Real>(&self, group: &str) -> Result<Vec<(String, Tensor<T>)>> {
        self.tensors
            .iter()
            .filter(|(e, _)| e.group == group)
            .map(|(e, v)| Ok((e.name.clone(), Tensor::from_f64(&e.shape, v)?)))
            .collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.tensors.iter().any(|(e, _)| e.group == group)
    }

    /// Restores momentum buffers for `store` from `group.velocity`.
    pub fn load_optimizer<T: Real>(&self, group: &str, store: &ParamStore<T>) -> Result<SgdState<T>> {
        let saved = self.group::<T>(&format!("{group}.velocity"))?;
        let mut state = SgdState::new(store.len());
        for (name, t) in saved {
            let i = store
                .entries()
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::Shape(format!("optimizer state for unknown parameter {group}/{name}")))?;
            state.velocity[i] = Some(t);
        }
        Ok(state)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(format!("truncated tensor {}", e.name)))?;
            let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 8 * n;
            tensors.push((e, v));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

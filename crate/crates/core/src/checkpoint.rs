//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "ABCKPT01"
//! length     u64 LE   byte length of the manifest
//! manifest   JSON     tensor table (name, shape, dtype = "f64", role, step) + metadata
//! data       f64 LE   one raw section per manifest tensor, in manifest order
//! ```
//!
//! Parameters come first in `ParamStore` order, then their AdamW moment
//! buffers, then auxiliary tensors (normalisation statistics and the like).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ABCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
    Aux,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    metadata: serde_json::Value,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub params: ParamStore,
    pub aux: IndexMap<String, Tensor>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<&[f64]> = Vec::new();
        for (name, e) in self.params.iter() {
            tensors.push(ManifestEntry {
                name: name.to_string(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f64".into(),
                role: Role::Param,
                step: Some(e.step),
            });
            data.push(e.tensor.values());
        }
        for (role, pick) in [(Role::AdamM, 0), (Role::AdamV, 1)] {
            for (name, e) in self.params.iter() {
                tensors.push(ManifestEntry {
                    name: name.to_string(),
                    shape: e.tensor.shape().to_vec(),
                    dtype: "f64".into(),
                    role,
                    step: None,
                });
                data.push(if pick == 0 { &e.m } else { &e.v });
            }
        }
        for (name, t) in &self.aux {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                role: Role::Aux,
                step: None,
            });
            data.push(t.values());
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors,
            metadata: self.metadata.clone(),
        })
        .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;

        let payload: usize = data.iter().map(|d| d.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for section in data {
            for v in section {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint container (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;

        let mut cursor = manifest_end;
        let mut params = ParamStore::new();
        let mut aux = IndexMap::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Format(format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let end = cursor + n * 8;
            if end > bytes.len() {
                return Err(Error::Format(format!("data section for {} is truncated", entry.name)));
            }
            let values: Vec<f64> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            match entry.role {
                Role::Param => {
                    params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?)?;
                    params.entry_mut(&entry.name).expect("just inserted").step = entry.step.unwrap_or(0);
                }
                Role::AdamM | Role::AdamV => {
                    let e = params
                        .entry_mut(&entry.name)
                        .ok_or_else(|| Error::Format(format!("moment buffer for unknown parameter {}", entry.name)))?;
                    if e.tensor.numel() != values.len() {
                        return Err(Error::Format(format!("moment buffer size mismatch for {}", entry.name)));
                    }
                    if entry.role == Role::AdamM {
                        e.m = values;
                    } else {
                        e.v = values;
                    }
                }
                Role::Aux => {
                    aux.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
                }
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after data sections", bytes.len() - cursor)));
        }
        Ok(Self {
            params,
            aux,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

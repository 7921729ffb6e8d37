//! Named-tensor archive used for network and predictor checkpoints.
//!
//! Layout: the 8-byte magic `DANASAR1`, a little-endian `u64` manifest length, a JSON manifest,
//! then the raw little-endian tensor payload. The manifest lists each tensor's name, dtype, shape
//! and byte range in the payload, and carries free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKey, ParamTable, StagedNetwork};
use crate::search_space::{ArchConfig, SearchSpaceSpec};

const MAGIC: &[u8; 8] = b"DANASAR1";

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len();
            let (dtype, shape) = match t {
                Tensor::F32(a) => {
                    a.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
                    (Dtype::F32, a.shape().to_vec())
                }
                Tensor::F64(a) => {
                    a.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
                    (Dtype::F64, a.shape().to_vec())
                }
            };
            entries.push(Entry { name: name.clone(), dtype, shape, offset, len: payload.len() - offset });
        }
        let manifest = serde_json::to_vec(&Manifest { meta: self.meta.clone(), tensors: entries })
            .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Archive(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mlen = usize::try_from(mlen).map_err(|_| bad("manifest length overflows"))?;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Archive(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let width = match e.dtype {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
            };
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Archive(format!("{}: shape overflows", e.name)))?;
            if count.checked_mul(width) != Some(e.len) {
                return Err(Error::Archive(format!("{}: byte length does not match shape", e.name)));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Archive(format!("{}: data out of bounds", e.name)))?;
            let raw = &payload[e.offset..end];
            let t = match e.dtype {
                Dtype::F32 => Tensor::F32(
                    ArrayD::from_shape_vec(
                        IxDyn(&e.shape),
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                    .map_err(|err| Error::Archive(err.to_string()))?,
                ),
                Dtype::F64 => Tensor::F64(
                    ArrayD::from_shape_vec(
                        IxDyn(&e.shape),
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                    .map_err(|err| Error::Archive(err.to_string()))?,
                ),
            };
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(Error::Archive(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    /// Writes through a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.tensors.get(name) {
            Some(Tensor::F32(a)) => Ok(a),
            Some(_) => Err(Error::Archive(format!("{name} is not f32"))),
            None => Err(Error::Archive(format!("missing tensor {name}"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.tensors.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(_) => Err(Error::Archive(format!("{name} is not f64"))),
            None => Err(Error::Archive(format!("missing tensor {name}"))),
        }
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Archive(format!("metadata lacks {key}")))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Residual block type written into network archives. Only basic two-conv blocks exist.
pub const BLOCK: &str = "basic";

pub fn network_to_archive(net: &StagedNetwork) -> Archive {
    let mut a = Archive::new(serde_json::json!({
        "kind": "network",
        "block": BLOCK,
        "spec": net.spec.to_string(),
        "config": net.config.to_string(),
        "num_classes": net.num_classes,
    }));
    for (k, t) in net.params.iter() {
        a.tensors.insert(k.to_string(), Tensor::F32(t.clone()));
    }
    a
}

pub fn network_from_archive(a: &Archive) -> Result<StagedNetwork> {
    if a.meta_str("kind")? != "network" {
        return Err(Error::Archive("archive does not hold a network".into()));
    }
    let block = a.meta_str("block")?;
    if block != BLOCK {
        return Err(Error::Archive(format!("unsupported block type {block:?}")));
    }
    let spec: SearchSpaceSpec = a.meta_str("spec")?.parse()?;
    let config: ArchConfig = a.meta_str("config")?.parse()?;
    let num_classes = a
        .meta
        .get("num_classes")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Archive("metadata lacks num_classes".into()))? as usize;
    let mut params = ParamTable::default();
    for name in a.tensors.keys() {
        let key: ParamKey = name.parse()?;
        params.insert(key, a.f32(name)?.clone());
    }
    StagedNetwork::from_params(&spec, &config, num_classes, params)
}

pub fn save_network(net: &StagedNetwork, path: &Path) -> Result<()> {
    network_to_archive(net).save(path)
}

pub fn load_network(path: &Path) -> Result<StagedNetwork> {
    network_from_archive(&Archive::load(path)?)
}

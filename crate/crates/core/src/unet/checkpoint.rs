//! Binary checkpoint format.
//!
//! ```text
//! magic    4 bytes   "QDCK"
//! version  u32 LE
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      {"config", "role", "quant", "tensors": [{"name", "shape"}]}
//! data               every tensor's f32 values, little-endian, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LayerQuant, ParamStore, Role, UnetConfig, UnetModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UnetConfig,
    role: Role,
    quant: Vec<LayerQuant>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl UnetModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            role: self.role,
            quant: self.quant.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::Checkpoint { path: origin.to_path_buf(), detail };
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut model = UnetModel::skeleton(header.config, header.role).map_err(|e| corrupt(e.to_string()))?;

        let expected: Vec<TensorEntry> = model
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect();
        if header.tensors != expected {
            return Err(corrupt("tensor table does not match the architecture of its config".into()));
        }
        if header.quant.len() != model.quant.len()
            || header.quant.iter().zip(&model.quant).any(|(a, b)| a.name != b.name)
        {
            return Err(corrupt("quantization table does not match the architecture".into()));
        }
        model.quant = header.quant;

        let mut data = &body[hlen..];
        let need = 4 * model.params.numel();
        if data.len() != need {
            return Err(corrupt(format!("expected {need} bytes of tensor data, found {}", data.len())));
        }
        for (_, t) in model.params.entries.iter_mut() {
            let n = t.numel();
            for (dst, chunk) in t.data_mut().iter_mut().zip(data[..4 * n].chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            data = &data[4 * n..];
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &UnetModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UnetModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    UnetModel::from_bytes(&bytes, path)
}

/// SHA-256 over every parameter's name, shape and little-endian values, as hex.
pub fn param_hash(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

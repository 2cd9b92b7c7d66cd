//! Single-file checkpoints: magic, version, a JSON header naming every
//! tensor with its shape, then the tensors as little-endian `f64`.
//!
//! Layout: `GMCK` · u32 version · u64 header length · header · payload.

use std::path::Path;

use geomoe_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub endianness: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined state: configuration echo, counters, statistics.
    pub meta: Value,
}

pub fn encode_checkpoint(meta: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        endianness: "le".into(),
        dtype: "f64".into(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return invalid("checkpoint: bad magic");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return invalid(format!("checkpoint: unsupported version {version}"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return invalid("checkpoint: truncated header");
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    if header.endianness != "le" || header.dtype != "f64" {
        return invalid(format!("checkpoint: unsupported layout {} {}", header.endianness, header.dtype));
    }
    let mut payload = &body[len..];
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if payload.len() != expected {
        return invalid(format!(
            "checkpoint: payload has {} bytes, header declares {expected}",
            payload.len()
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let (chunk, rest) = payload.split_at(n * 8);
        payload = rest;
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((header, tensors))
}

pub fn write_checkpoint(path: &Path, meta: &Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode_checkpoint(meta, tensors)?;
    // write-then-rename keeps the previous checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

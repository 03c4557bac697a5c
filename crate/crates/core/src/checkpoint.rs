//! Checkpoint files.
//!
//! Layout: `FLYN` | u32 LE version | u64 LE header length | JSON header | parameter blob |
//! Adam first-moment blob | Adam second-moment blob. Blobs are little-endian f32, one layer
//! after another in layer-id order, weights then biases.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::net::{NetworkSpec, ParamSet};
use crate::optim::AdamState;
use crate::tensor::{Shape4, Tensor4};
use crate::train::{TrainConfig, TrainHistory};

pub const MAGIC: &[u8; 4] = b"FLYN";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated header: file ends before the declared {need}-byte header")]
    TruncatedHeader { need: u64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated parameter blob: {have} of {need} bytes present")]
    TruncatedBlob { have: u64, need: u64 },
    #[error("header and blob lengths disagree: {0}")]
    LengthMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamSet<f32>,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    weight_shape: [usize; 4],
    bias_len: usize,
    /// Byte offset inside each blob.
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    config: TrainConfig,
    history: TrainHistory,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    /// Length of each of the three blobs.
    blob_bytes: u64,
}

fn write_blob(out: &mut Vec<u8>, set: &ParamSet<f32>) {
    for (_, p) in set.iter() {
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.spec.check_params(&ckpt.params)?;
    if !ckpt.params.same_layout(&ckpt.adam.m) || !ckpt.params.same_layout(&ckpt.adam.v) {
        return Err(Error::shape("optimizer moments do not match the parameters"));
    }
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0u64;
    for (id, p) in ckpt.params.iter() {
        let s = p.weights.shape();
        let bytes = 4 * p.len() as u64;
        tensors.push(TensorEntry {
            layer: id.clone(),
            weight_shape: [s.n, s.c, s.h, s.w],
            bias_len: p.bias.len(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let header = Header {
        spec: ckpt.spec.clone(),
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
        adam_step: ckpt.adam.t,
        tensors,
        blob_bytes: offset,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 3 * offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_blob(&mut out, &ckpt.params);
    write_blob(&mut out, &ckpt.adam.m);
    write_blob(&mut out, &ckpt.adam.v);
    Ok(out)
}

fn read_blob(bytes: &[u8], tensors: &[TensorEntry]) -> Result<ParamSet<f32>, CheckpointError> {
    let mut layers = BTreeMap::new();
    for t in tensors {
        let [n, c, h, w] = t.weight_shape;
        let shape = Shape4::new(n, c, h, w);
        let count = shape.len() + t.bias_len;
        if t.bytes != 4 * count as u64 {
            return Err(CheckpointError::LengthMismatch(format!(
                "layer '{}' declares {} bytes for {count} values",
                t.layer, t.bytes
            )));
        }
        let start = t.offset as usize;
        let raw = bytes
            .get(start..start + t.bytes as usize)
            .ok_or_else(|| CheckpointError::LengthMismatch(format!("layer '{}' lies outside the blob", t.layer)))?;
        let mut vals = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let weights: Vec<f32> = vals.by_ref().take(shape.len()).collect();
        let bias: Vec<f32> = vals.collect();
        let weights = Tensor4::from_vec(shape, weights).expect("length checked");
        layers.insert(t.layer.clone(), LayerParams { weights, bias });
    }
    Ok(ParamSet::from_map(layers))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::TruncatedHeader { need: 0 }.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[PREFIX_LEN..];
    if (body.len() as u64) < header_len {
        return Err(CheckpointError::TruncatedHeader { need: header_len }.into());
    }
    let (json, blobs) = body.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;

    let declared: u64 = header.tensors.iter().map(|t| t.bytes).sum();
    if declared != header.blob_bytes {
        return Err(CheckpointError::LengthMismatch(format!(
            "tensors total {declared} bytes, header declares {}",
            header.blob_bytes
        ))
        .into());
    }
    let need = 3 * header.blob_bytes;
    let have = blobs.len() as u64;
    if have < need {
        return Err(CheckpointError::TruncatedBlob { have, need }.into());
    }
    if have > need {
        return Err(CheckpointError::LengthMismatch(format!("{} trailing bytes after the blobs", have - need)).into());
    }
    let n = header.blob_bytes as usize;
    let params = read_blob(&blobs[..n], &header.tensors)?;
    let m = read_blob(&blobs[n..2 * n], &header.tensors)?;
    let v = read_blob(&blobs[2 * n..], &header.tensors)?;
    header
        .spec
        .check_params(&params)
        .map_err(|e| CheckpointError::LengthMismatch(format!("parameters do not fit the network: {e}")))?;
    Ok(Checkpoint {
        spec: header.spec,
        params,
        adam: AdamState { m, v, t: header.adam_step },
        config: header.config,
        history: header.history,
    })
}

/// Write through a temporary file in the target directory, then rename over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

//! Checkpoint file format: one compact JSON header line (kind, config,
//! seed, epoch, parameter names/shapes/offsets) followed by the raw
//! little-endian f64 payload. Round trips are byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "fusion-early")]
    FusionEarly,
    #[serde(rename = "fusion-late")]
    FusionLate,
    #[serde(rename = "ppmae")]
    Ppmae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::FusionEarly => "fusion-early",
            ModelKind::FusionLate => "fusion-late",
            ModelKind::Ppmae => "ppmae",
        })
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    seed: u64,
    epoch: u64,
    config: serde_json::Value,
    params: Vec<HeaderParam>,
}

/// Named, shaped parameters plus the config that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    pub epoch: u64,
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let mut offset = 0;
    let params: Vec<HeaderParam> = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let p = HeaderParam {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            };
            offset += t.numel();
            p
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        kind: ckpt.kind,
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        params,
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.reserve(offset * 8);
    for (_, t) in &ckpt.params {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| ModelError::CheckpointIo { path: path.to_path_buf(), source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path)
        .map_err(|e| ModelError::CheckpointIo { path: path.to_path_buf(), source: e })?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[newline + 1..];
    let total: usize = header.params.iter().map(|p| p.len).sum();
    if payload.len() != total * 8 {
        return Err(ModelError::Checkpoint(format!(
            "payload holds {} bytes, header expects {}",
            payload.len(),
            total * 8
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let want: usize = p.shape.iter().product();
        if want != p.len {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{}`: shape {:?} disagrees with len {}",
                p.name, p.shape, p.len
            )));
        }
        let start = p.offset * 8;
        let end = start + p.len * 8;
        if end > payload.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{}` extends past payload",
                p.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(p.shape.clone(), data)
            .map_err(|e| ModelError::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
        params.push((p.name.clone(), t));
    }
    Ok(Checkpoint {
        kind: header.kind,
        seed: header.seed,
        epoch: header.epoch,
        config: header.config,
        params,
    })
}

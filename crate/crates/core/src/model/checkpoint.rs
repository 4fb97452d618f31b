//! Checkpoint layout: an 8-byte little-endian header length, a JSON header,
//! then the raw little-endian payload of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderParams, ModelConfig, ModelError};
use crate::numcore::{ParamSet, Precision, Scalar, Tensor};

pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub ckpt_version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub tied_lm_head: bool,
    pub params: Vec<TensorEntry>,
    pub payload_len: usize,
    /// Hex SHA-256 of the payload.
    pub payload_sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Scalar>(params: &EncoderParams<T>, path: &Path) -> Result<CheckpointHeader, ModelError> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for p in params.set.iter() {
        let offset = payload.len();
        for v in p.value.data() {
            v.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: payload.len() - offset,
            trainable: p.trainable,
        });
    }
    let header = CheckpointHeader {
        ckpt_version: CKPT_VERSION,
        precision: T::PRECISION,
        config: params.config.clone(),
        tied_lm_head: params.config.tie_lm_head,
        params: entries,
        payload_len: payload.len(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(header)
}

/// Reads a checkpoint header without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), ModelError> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| corrupt("file shorter than header length"))?.try_into().expect("8 bytes");
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length overflow"))?;
    let end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.ckpt_version != CKPT_VERSION {
        return Err(corrupt(format!("unsupported ckpt_version {}", header.ckpt_version)));
    }
    Ok((header, &bytes[end..]))
}

/// Loads a checkpoint. Values stored at another precision are converted.
/// When `expect` is given the stored config must have the same shape.
pub fn load_checkpoint<T: Scalar>(path: &Path, expect: Option<&ModelConfig>) -> Result<EncoderParams<T>, ModelError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, payload) = read_header(&bytes)?;
    if payload.len() != header.payload_len {
        return Err(corrupt(format!("payload is {} bytes, header says {}", payload.len(), header.payload_len)));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    if let Some(c) = expect {
        if !c.same_shape(&header.config) {
            return Err(ModelError::Config(format!(
                "checkpoint config {:?} does not match expected {:?}",
                header.config, c
            )));
        }
    }
    if header.tied_lm_head != header.config.tie_lm_head {
        return Err(corrupt("tie flag disagrees with config"));
    }
    let width = header.precision.byte_width();
    let mut set = ParamSet::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if e.len != n * width {
            return Err(corrupt(format!("{}: {} bytes for {n} elements", e.name, e.len)));
        }
        let chunk = payload
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| corrupt(format!("{}: range outside payload", e.name)))?;
        let vals: Vec<T> = chunk
            .chunks_exact(width)
            .map(|b| match header.precision {
                Precision::F32 => T::of(f32::read_le(b) as f64),
                Precision::F64 => T::of(f64::read_le(b)),
            })
            .collect();
        set.add(&e.name, Tensor::new(e.shape.clone(), vals)?, e.trainable)?;
    }
    EncoderParams::from_set(header.config, set)
}

//! `EAMC` checkpoint blobs.
//!
//! Layout (little-endian): magic `EAMC`, `u32` version, then seven `u32`
//! header fields (dim, heads, proj_dim, classes, aggregation code,
//! weighting code, shared-frame-projection flag), then every tensor of
//! [`ModelParams::tensors`] as `f32` in declaration order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::model::{ModelConfig, ModelParams};
use crate::nn::{Aggregation, AttentionWeighting};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EAMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_FIELDS: usize = 7;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    VersionMismatch(u32),
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    TruncatedFile { need: usize, have: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid checkpoint header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let c = &params.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut buf, c.dim);
    push_u32(&mut buf, c.heads);
    push_u32(&mut buf, c.proj_dim);
    push_u32(&mut buf, c.n_classes);
    push_u32(&mut buf, c.aggregation.code() as usize);
    push_u32(&mut buf, weighting_code(c.weighting) as usize);
    push_u32(&mut buf, usize::from(c.shared_frame_projection));
    for t in params.tensors() {
        for &v in t {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    buf
}

fn weighting_code(w: AttentionWeighting) -> u32 {
    match w {
        AttentionWeighting::Linear => 0,
        AttentionWeighting::Softmax => 1,
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn params_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>, CheckpointError> {
    let header_len = 8 + 4 * HEADER_FIELDS;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(CheckpointError::TruncatedFile { need: 8, have: bytes.len() });
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    if bytes.len() < header_len {
        return Err(CheckpointError::TruncatedFile { need: header_len, have: bytes.len() });
    }
    let h: Vec<u32> = (0..HEADER_FIELDS).map(|i| read_u32(bytes, 8 + 4 * i)).collect();
    let aggregation =
        Aggregation::from_code(h[4]).ok_or_else(|| CheckpointError::BadHeader(format!("aggregation code {}", h[4])))?;
    let weighting = match h[5] {
        0 => AttentionWeighting::Linear,
        1 => AttentionWeighting::Softmax,
        other => return Err(CheckpointError::BadHeader(format!("weighting code {other}"))),
    };
    let shared = match h[6] {
        0 => false,
        1 => true,
        other => return Err(CheckpointError::BadHeader(format!("shared flag {other}"))),
    };
    let config = ModelConfig {
        dim: h[0] as usize,
        heads: h[1] as usize,
        proj_dim: h[2] as usize,
        n_classes: h[3] as usize,
        aggregation,
        weighting,
        shared_frame_projection: shared,
    };
    let mut params = ModelParams::<T>::zeros(config).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let n_values: usize = params.tensors().iter().map(|t| t.len()).sum();
    let need = header_len + 4 * n_values;
    if bytes.len() < need {
        return Err(CheckpointError::TruncatedFile { need, have: bytes.len() });
    }
    if bytes.len() > need {
        return Err(CheckpointError::TrailingBytes(bytes.len() - need));
    }
    let mut values = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    for t in params.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(&mut values) {
            *slot = T::of(f64::from(v));
        }
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>, CheckpointError> {
    params_from_bytes(&fs::read(path)?)
}

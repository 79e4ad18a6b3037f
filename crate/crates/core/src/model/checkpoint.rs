//! Binary checkpoint format.
//!
//! Layout (little-endian): 8-byte magic `MNMTCKPT`, `u32` version, `u32`
//! byte length of a TOML-serialized [`ModelConfig`] followed by that text,
//! `u32` tensor count, then per tensor a `u32` rank, `u32` dims and `f32`
//! values. Tensors appear in [`ModelParams::tensors`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MNMTCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("bad config block: {0}")]
    Config(String),
    #[error("tensor {index}: expected shape {expected:?}, found {found:?}")]
    Shape { index: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("non-finite value in tensor {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes `params` as 32-bit floats.
pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    let cfg = toml::to_string(&params.config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    put_u32(w, cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    let tensors = params.tensors();
    put_u32(w, tensors.len())?;
    for t in tensors {
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams<f32>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut cfg = vec![0u8; get_u32(r)? as usize];
    r.read_exact(&mut cfg)?;
    let cfg = String::from_utf8(cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let config: ModelConfig = toml::from_str(&cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut params = ModelParams::<f32>::zeros(&config);
    let count = get_u32(r)? as usize;
    let expected = params.tensors().len();
    if count != expected {
        return Err(CheckpointError::TensorCount { expected, found: count });
    }
    for (index, t) in params.tensors_mut().into_iter().enumerate() {
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != t.shape() {
            return Err(CheckpointError::Shape { index, expected: t.shape().to_vec(), found: shape });
        }
        let mut bytes = vec![0u8; t.len() * 4];
        r.read_exact(&mut bytes)?;
        let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(index));
        }
        *t = Tensor::from_vec(&shape, values);
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

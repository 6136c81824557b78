//! OCVC checkpoint container: magic, version, a JSON header naming every
//! array with its shape, then the arrays as little-endian scalars in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::params::ParamSet;
use crate::scalar::{Dtype, Scalar};
use crate::token_store::Reader;
use crate::trainer::{CheckpointBundle, Model, TrainConfig};

pub const OCVC_MAGIC: &[u8; 4] = b"OCVC";
pub const OCVC_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    channels: usize,
    n_max: usize,
    step: usize,
    config: TrainConfig,
    loss_history: Vec<f64>,
    arrays: Vec<ArrayEntry>,
}

pub fn encode_checkpoint<T: Scalar>(bundle: &CheckpointBundle<T>) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    bundle.model.visit("", &mut |name, m| {
        arrays.push(ArrayEntry {
            name,
            shape: [m.rows(), m.cols()],
        });
        for &v in m.as_slice() {
            v.write_le(&mut payload);
        }
    });
    let header = Header {
        dtype: T::DTYPE,
        channels: bundle.c(),
        n_max: bundle.n_max(),
        step: bundle.step,
        config: bundle.config.clone(),
        loss_history: bundle.loss_history.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + payload.len());
    out.extend_from_slice(OCVC_MAGIC);
    out.extend_from_slice(&OCVC_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Decodes a checkpoint into scalar type `T`; the stored dtype must match.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<CheckpointBundle<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(OCVC_MAGIC.as_slice()) {
        return Err(OcvtpError::Format("missing OCVC magic".into()));
    }
    let version = r.u16()?;
    if version != OCVC_VERSION {
        return Err(OcvtpError::Format(format!(
            "unsupported OCVC version {version} (expected {OCVC_VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| OcvtpError::Format(format!("checkpoint header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(OcvtpError::Format(format!(
            "checkpoint holds {:?} arrays, requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut model = Model::<T>::init(header.channels, header.n_max, &header.config)
        .map_err(|e| OcvtpError::Format(format!("checkpoint config: {e}")))?;
    let mut expected = Vec::new();
    model.visit("", &mut |name, m| expected.push((name, m.shape())));
    if expected.len() != header.arrays.len() {
        return Err(OcvtpError::Format(format!(
            "checkpoint lists {} arrays, model has {}",
            header.arrays.len(),
            expected.len()
        )));
    }
    let size = T::DTYPE.size();
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.arrays.iter().zip(&expected) {
        if &entry.name != name || (entry.shape[0], entry.shape[1]) != *shape {
            return Err(OcvtpError::Format(format!(
                "array {} {:?} does not match model array {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let count = shape.0 * shape.1;
        let raw = r.take(count * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        loaded.push(Matrix::from_vec(shape.0, shape.1, data)?);
    }
    if r.pos != bytes.len() {
        return Err(OcvtpError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let mut it = loaded.into_iter();
    model.visit_mut("", &mut |_, m| *m = it.next().expect("counted above"));
    Ok(CheckpointBundle {
        model,
        config: header.config,
        step: header.step,
        loss_history: header.loss_history,
    })
}

pub fn save_checkpoint<T: Scalar>(bundle: &CheckpointBundle<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle)).map_err(|e| OcvtpError::storage(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointBundle<T>> {
    let bytes = std::fs::read(path).map_err(|e| OcvtpError::storage(path, e))?;
    decode_checkpoint(&bytes)
}

/// Stored dtype of a checkpoint file, so callers can pick the scalar type.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path).map_err(|e| OcvtpError::storage(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).ok() != Some(OCVC_MAGIC.as_slice()) {
        return Err(OcvtpError::Format("missing OCVC magic".into()));
    }
    r.u16()?;
    let len = r.u32()? as usize;
    #[derive(Deserialize)]
    struct Peek {
        dtype: Dtype,
    }
    let p: Peek = serde_json::from_slice(r.take(len)?)
        .map_err(|e| OcvtpError::Format(format!("checkpoint header: {e}")))?;
    Ok(p.dtype)
}

//! Checkpoint persistence.
//!
//! File layout, byte-exact and trivially parseable from any language:
//!
//! ```text
//! magic               6 bytes  "SPRB1\n"
//! header length       u32 little-endian
//! header              UTF-8 JSON (see [`Header`])
//! payload             raw tensor bytes in manifest order, little-endian
//!                     IEEE-754 floats, one byte per mask element
//! checksum            8 bytes  little-endian 64-bit FNV-1a over the payload
//! ```
//!
//! Save / load round-trips are bitwise identical. Loading a checkpoint at a
//! different precision than requested is an explicit error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Mask, ModelSpec, ParamSet};
use crate::rng::fnv1a64;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, Velocity};

pub const MAGIC: &[u8; 6] = b"SPRB1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint precision is {found}, run requested {requested}")]
    PrecisionMismatch { found: String, requested: String },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    precision: String,
    spec: ModelSpec,
    epoch: usize,
    seed: u64,
    rng_counter: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    byte_offset: usize,
    byte_length: usize,
}

fn push_tensor<S: Scalar>(
    name: &str,
    t: &Tensor<S>,
    entries: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
) {
    let byte_offset = payload.len();
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: S::DTYPE,
        byte_offset,
        byte_length: payload.len() - byte_offset,
    });
}

fn push_mask_tensor(name: &str, t: &Tensor<u8>, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    let byte_offset = payload.len();
    payload.extend_from_slice(t.data());
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: Dtype::U8,
        byte_offset,
        byte_length: t.len(),
    });
}

pub fn save_checkpoint<S: Scalar>(checkpoint: &Checkpoint<S>, path: &Path) -> Result<()> {
    let bytes = to_bytes(checkpoint)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn to_bytes<S: Scalar>(checkpoint: &Checkpoint<S>) -> Result<Vec<u8>> {
    let params = &checkpoint.params;
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        push_tensor(&format!("weight_{}", l), w, &mut entries, &mut payload);
        push_tensor(&format!("bias_{}", l), b, &mut entries, &mut payload);
    }
    if let Some(mask) = &checkpoint.mask {
        for (l, m) in mask.layers.iter().enumerate() {
            push_mask_tensor(&format!("mask_{}", l), m, &mut entries, &mut payload);
        }
    }
    if let Some(vel) = &checkpoint.velocity {
        for (l, (w, b)) in vel.weights.iter().zip(&vel.biases).enumerate() {
            push_tensor(&format!("velocity_w_{}", l), w, &mut entries, &mut payload);
            push_tensor(&format!("velocity_b_{}", l), b, &mut entries, &mut payload);
        }
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        precision: S::DTYPE.name().to_string(),
        spec: params.spec.clone(),
        epoch: checkpoint.epoch,
        seed: checkpoint.seed,
        rng_counter: checkpoint.rng_counter,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    Ok(out)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    from_bytes(&std::fs::read(path)?)
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len =
        u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 4;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start + 8 {
        return Err(CheckpointError::LengthMismatch(format!(
            "file has {} bytes, header claims {} header bytes",
            bytes.len(),
            header_len
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch(header.format_version));
    }
    if header.precision != S::DTYPE.name() {
        return Err(CheckpointError::PrecisionMismatch {
            found: header.precision.clone(),
            requested: S::DTYPE.name().to_string(),
        });
    }

    let payload_len: usize = header
        .tensors
        .iter()
        .map(|t| t.byte_offset + t.byte_length)
        .max()
        .unwrap_or(0);
    if bytes.len() != payload_start + payload_len + 8 {
        return Err(CheckpointError::LengthMismatch(format!(
            "payload has {} bytes, manifest expects {}",
            bytes.len().saturating_sub(payload_start + 8),
            payload_len
        )));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored_sum = u64::from_le_bytes(bytes[payload_start + payload_len..].try_into().unwrap());
    if fnv1a64(payload) != stored_sum {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let find = |name: &str| header.tensors.iter().find(|t| t.name == name);
    let read_scalar = |entry: &TensorEntry| -> Result<Tensor<S>> {
        if entry.dtype != S::DTYPE {
            return Err(CheckpointError::PrecisionMismatch {
                found: entry.dtype.name().to_string(),
                requested: S::DTYPE.name().to_string(),
            });
        }
        let width = entry.dtype.byte_width();
        let count: usize = entry.shape.iter().product();
        if entry.byte_length != count * width {
            return Err(CheckpointError::LengthMismatch(format!(
                "tensor {} has {} bytes for shape {:?}",
                entry.name, entry.byte_length, entry.shape
            )));
        }
        let raw = &payload[entry.byte_offset..entry.byte_offset + entry.byte_length];
        let data = raw.chunks_exact(width).map(S::from_le_slice).collect();
        Ok(Tensor::from_vec(entry.shape.clone(), data))
    };

    header.spec.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let layers = header.spec.num_layers();
    let mut params = ParamSet::<S>::zeros(&header.spec);
    for l in 0..layers {
        let w = find(&format!("weight_{}", l))
            .ok_or_else(|| CheckpointError::Invalid(format!("missing weight_{}", l)))?;
        let b = find(&format!("bias_{}", l))
            .ok_or_else(|| CheckpointError::Invalid(format!("missing bias_{}", l)))?;
        params.weights[l] = read_scalar(w)?;
        params.biases[l] = read_scalar(b)?;
        if params.weights[l].shape()
            != [
                header.spec.effective_sizes()[l + 1],
                header.spec.effective_sizes()[l],
            ]
        {
            return Err(CheckpointError::Invalid(format!(
                "weight_{} shape {:?} does not match spec",
                l,
                params.weights[l].shape()
            )));
        }
    }

    let mask = if find("mask_0").is_some() {
        let mut layers_v = Vec::with_capacity(layers);
        for l in 0..layers {
            let entry = find(&format!("mask_{}", l))
                .ok_or_else(|| CheckpointError::Invalid(format!("missing mask_{}", l)))?;
            let count: usize = entry.shape.iter().product();
            if entry.byte_length != count {
                return Err(CheckpointError::LengthMismatch(format!(
                    "mask_{} has {} bytes for shape {:?}",
                    l, entry.byte_length, entry.shape
                )));
            }
            let raw = &payload[entry.byte_offset..entry.byte_offset + entry.byte_length];
            if raw.iter().any(|&b| b > 1) {
                return Err(CheckpointError::Invalid(format!(
                    "mask_{} has entries outside {{0, 1}}",
                    l
                )));
            }
            layers_v.push(Tensor::from_vec(entry.shape.clone(), raw.to_vec()));
        }
        Some(Mask::from_layers(layers_v))
    } else {
        None
    };

    let velocity = if find("velocity_w_0").is_some() {
        let mut vel = Velocity::<S>::zeros(&header.spec);
        for l in 0..layers {
            let w = find(&format!("velocity_w_{}", l))
                .ok_or_else(|| CheckpointError::Invalid(format!("missing velocity_w_{}", l)))?;
            let b = find(&format!("velocity_b_{}", l))
                .ok_or_else(|| CheckpointError::Invalid(format!("missing velocity_b_{}", l)))?;
            vel.weights[l] = read_scalar(w)?;
            vel.biases[l] = read_scalar(b)?;
        }
        Some(vel)
    } else {
        None
    };

    Ok(Checkpoint {
        params,
        epoch: header.epoch,
        seed: header.seed,
        rng_counter: header.rng_counter,
        mask,
        velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::init_params;

    fn fixture() -> Checkpoint<f32> {
        let spec = ModelSpec::new(vec![4, 6, 3], 1).unwrap();
        let params = init_params(&spec, 5);
        let mut mask = Mask::ones(&spec);
        *mask.layers[0].at_mut(0, 1) = 0;
        let mut vel = Velocity::zeros(&spec);
        vel.weights[1].data_mut()[2] = 0.25;
        Checkpoint {
            params,
            epoch: 7,
            seed: 42,
            rng_counter: 7,
            mask: Some(mask),
            velocity: Some(vel),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = fixture();
        let bytes = to_bytes(&ck).unwrap();
        let back: Checkpoint<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        // save -> load -> save yields byte-identical files.
        let again = to_bytes(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sprb");
        let ck = fixture();
        save_checkpoint(&ck, &path).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn corruption_is_detected() {
        let ck = fixture();
        let bytes = to_bytes(&ck).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(CheckpointError::BadMagic)));

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(
            from_bytes::<f32>(truncated),
            Err(CheckpointError::LengthMismatch(_))
        ));

        let mut flipped = bytes.clone();
        let payload_byte = bytes.len() - 10;
        flipped[payload_byte] ^= 0xff;
        assert!(matches!(
            from_bytes::<f32>(&flipped),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn precision_mismatch_is_explicit() {
        let ck = fixture();
        let bytes = to_bytes(&ck).unwrap();
        assert!(matches!(
            from_bytes::<f64>(&bytes),
            Err(CheckpointError::PrecisionMismatch { .. })
        ));
    }

    #[test]
    fn mask_and_velocity_are_optional() {
        let mut ck = fixture();
        ck.mask = None;
        ck.velocity = None;
        let back: Checkpoint<f32> = from_bytes(&to_bytes(&ck).unwrap()).unwrap();
        assert!(back.mask.is_none());
        assert!(back.velocity.is_none());
        assert_eq!(back.params, ck.params);
    }
}

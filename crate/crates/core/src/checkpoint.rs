//! Self-describing model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TSTRUCT\0"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen     UTF-8 JSON: metadata + tensor directory
//! payload  ...      raw IEEE-754 tensor data, in directory order
//! ```
//!
//! Each directory entry carries the tensor name, dtype, shape, and byte offset
//! and length within the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureConfig;
use crate::harmony::{ChordDictionary, HarmonyError};
use crate::nn::{LossConfig, ModelParams, ModelShape, NnError, Scalar, Weights};

pub const MAGIC: &[u8; 8] = b"TSTRUCT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Chords(#[from] HarmonyError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// Everything needed to rebuild the input encoding at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub shape: ModelShape,
    pub features: FeatureConfig,
    /// Triad classes as `"PC:QUALITY"`; the unknown class is implied last.
    pub chords: Vec<String>,
    pub loss: LossConfig,
    /// Free-form snapshot of the run configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn dictionary(&self) -> Result<ChordDictionary, HarmonyError> {
        ChordDictionary::from_strings(&self.meta.chords)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.meta, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (meta, params) = decode(bytes)?;
        let ckpt = Self { meta, params };
        let dict = ckpt.dictionary()?;
        if dict.len() != ckpt.meta.shape.harmony_classes {
            return Err(CheckpointError::Header(format!(
                "{} chord classes but model has {}",
                dict.len(),
                ckpt.meta.shape.harmony_classes
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn encode<F: Scalar>(meta: &CheckpointMeta, params: &ModelParams<F>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.weights.len() * F::BYTES);
    let mut tensors = Vec::new();
    for (name, shape, data) in params.weights.tensors() {
        let offset = payload.len();
        for &v in data {
            v.put_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            dtype: F::DTYPE.to_string(),
            shape,
            offset,
            length: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<(CheckpointMeta, ModelParams<F>), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(16..16 + hlen).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[16 + hlen..];

    let mut weights = Weights::<F>::zeros(&header.meta.shape);
    let mut slots = weights.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors stored, model needs {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for (entry, (name, slot)) in header.tensors.iter().zip(slots.iter_mut()) {
        let fail = |reason: String| CheckpointError::Tensor {
            name: entry.name.clone(),
            reason,
        };
        if &entry.name != name {
            return Err(fail(format!("expected tensor {name}")));
        }
        if entry.dtype != F::DTYPE {
            return Err(fail(format!("dtype {} but loading as {}", entry.dtype, F::DTYPE)));
        }
        let n: usize = entry.shape.iter().product();
        if n != slot.len() || entry.length != n * F::BYTES {
            return Err(fail(format!("shape {:?} does not fit the model", entry.shape)));
        }
        let data = payload
            .get(entry.offset..entry.offset + entry.length)
            .ok_or(CheckpointError::Truncated)?;
        for (v, chunk) in slot.iter_mut().zip(data.chunks_exact(F::BYTES)) {
            *v = F::get_le(chunk);
        }
    }
    drop(slots);
    let params = ModelParams::from_weights(header.meta.shape, weights)?;
    Ok((header.meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let shape = ModelShape {
            num_layers: 2,
            hidden_size: 5,
            input_dim: 35 + 3 + 5,
            melody_classes: 35,
            harmony_classes: 3,
            dropout_keep: 0.5,
        };
        let params = ModelParams::init(shape, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                shape,
                features: FeatureConfig::countdown_and_beat(),
                chords: vec!["0:maj".into(), "9:min".into()],
                loss: LossConfig::default(),
                config: serde_json::json!({"experiment": "FC"}),
            },
            params,
        }
    }

    #[test]
    fn bit_exact_reload() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        for ((_, _, a), (_, _, b)) in ckpt
            .params
            .weights
            .tensors()
            .iter()
            .zip(back.params.weights.tensors().iter())
        {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.dictionary().unwrap().len(), 3);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(CheckpointError::Truncated)
        ));
        assert!(matches!(decode::<f64>(&bytes), Err(CheckpointError::Tensor { .. })));
    }

    #[test]
    fn f64_payload_round_trips() {
        let ckpt = sample();
        let p64 = ckpt.params.cast::<f64>();
        let bytes = encode(&ckpt.meta, &p64);
        let (_, back) = decode::<f64>(&bytes).unwrap();
        assert_eq!(back, p64);
    }
}

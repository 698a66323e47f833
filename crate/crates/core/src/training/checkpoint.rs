//! Versioned binary checkpoints.
//!
//! ```text
//! "PHIM1"
//! u32 format version
//! u32 len, JSON config block {model, train}
//! u32 n_tensors
//! per tensor: u16 len, utf-8 name; u32 ndim; ndim x u32 dims; f64 LE values
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{Model, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PHIM1";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn encode_checkpoint(model: &Model, train: &TrainConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&CheckpointConfig {
        model: model.config.clone(),
        train: train.clone(),
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = model.params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, TrainConfig)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "PHIM1" });
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body
            .get(pos..pos + n)
            .ok_or_else(|| Error::Parse("checkpoint ends early".into()))?;
        pos += n;
        Ok(s)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = u32_at(take(4)?) as usize;
    let config: CheckpointConfig =
        serde_json::from_slice(take(config_len)?).map_err(|e| Error::Parse(e.to_string()))?;
    let n_tensors = u32_at(take(4)?) as usize;
    let expected_names: Vec<String> = ModelParams::init(
        &config.model,
        &mut rand_chacha::ChaCha8Rng::from_seed_zero(),
    )
    .named_tensors()
    .into_iter()
    .map(|(n, _)| n)
    .collect();
    let mut tensors = Vec::with_capacity(n_tensors);
    for k in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|e| Error::Parse(e.to_string()))?;
        if expected_names.get(k) != Some(&name) {
            return Err(Error::Parse(format!("unexpected tensor {name:?} at position {k}")));
        }
        let ndim = u32_at(take(4)?) as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u32_at(take(4)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if pos != body.len() {
        return Err(Error::Parse("trailing bytes in checkpoint".into()));
    }
    let params = ModelParams::from_tensors(&config.model, tensors)?;
    Ok((Model::new(config.model, params)?, config.train))
}

trait SeedZero {
    fn from_seed_zero() -> Self;
}

impl SeedZero for rand_chacha::ChaCha8Rng {
    fn from_seed_zero() -> Self {
        rand::SeedableRng::seed_from_u64(0)
    }
}

pub fn save_checkpoint(model: &Model, train: &TrainConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, train)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    decode_checkpoint(&fs::read(path)?)
}

//! Layout (all integers little-endian):
//!
//! ```text
//! magic "NPFNCKPT" | u32 version
//! u64 len | model config JSON
//! u64 len | metadata JSON
//! u32 tensor count, then per tensor: u32 name len | name | u32 rank | u64 dims… | f64 values…
//! u8 optimizer flag [u64 step | u64 skipped | f64 first moments… | f64 second moments…]
//! u8 position flag  [u64 seed | u64 epoch | u64 step in epoch | u64 global step | f64 epoch loss sum]
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Values are stored as f64 regardless of the build precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bytes::{field_err, ByteReader, ByteWriter};
use super::{write_atomic, FormatError};
use crate::model::{param_shapes, ModelConfig, ModelParams};
use crate::numerics::{Real, Tensor};
use crate::training::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NPFNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a run stands in its deterministic data stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPosition {
    pub seed: u64,
    pub epoch: u64,
    pub step_in_epoch: u64,
    pub global_step: u64,
    /// Sum of batch losses in the current epoch (for the running mean).
    #[serde(default)]
    pub epoch_loss_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub position: Option<TrainingPosition>,
    /// Effective configuration of the run that produced the checkpoint.
    pub meta: serde_json::Value,
}

fn write_values(w: &mut ByteWriter, t: &Tensor) {
    t.data().iter().for_each(|&v| w.f64(v as f64));
}

fn read_values(r: &mut ByteReader, shape: &[usize], field: &str) -> Result<Tensor, FormatError> {
    let len: usize = shape.iter().product();
    if len.saturating_mul(8) > r.remaining() {
        return Err(FormatError::Truncated { offset: r.pos, needed: len * 8 });
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let at = r.pos;
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(field_err(field, at, "non-finite value"));
        }
        data.push(v as Real);
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| field_err(field, r.pos, e.to_string()))
}

impl Checkpoint {
    pub fn inference_only(model_config: ModelConfig, params: ModelParams) -> Self {
        Self { model_config, params, optimizer: None, position: None, meta: serde_json::Value::Null }
    }

    /// Hex SHA-256 of the weights alone (as little-endian f64), so runs can
    /// be compared regardless of metadata.
    pub fn params_sha256(&self) -> String {
        let mut h = Sha256::new();
        self.params.for_each(|_, t| t.data().iter().for_each(|&v| h.update((v as f64).to_le_bytes())));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.raw(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(&serde_json::to_vec(&self.model_config).expect("config serializes"));
        w.blob(&serde_json::to_vec(&self.meta).expect("metadata serializes"));
        w.u32(self.params.count() as u32);
        self.params.for_each(|name, t| {
            w.u32(name.len() as u32);
            w.raw(name.as_bytes());
            w.u32(t.shape().len() as u32);
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            write_values(&mut w, t);
        });
        match &self.optimizer {
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                w.u64(opt.skipped);
                opt.m.for_each(|_, t| write_values(&mut w, t));
                opt.v.for_each(|_, t| write_values(&mut w, t));
            }
            None => w.u8(0),
        }
        match &self.position {
            Some(p) => {
                w.u8(1);
                for v in [p.seed, p.epoch, p.step_in_epoch, p.global_step] {
                    w.u64(v);
                }
                w.f64(p.epoch_loss_sum);
            }
            None => w.u8(0),
        }
        let digest = Sha256::digest(&w.buf);
        w.raw(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 12 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic { expected: "checkpoint" });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version { kind: "checkpoint", found: version, supported: CHECKPOINT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(FormatError::Checksum);
        }
        let mut r = ByteReader::new(body);
        r.take(12)?;
        let at = r.pos;
        let model_config: ModelConfig = serde_json::from_slice(r.blob("model_config")?)
            .map_err(|e| field_err("model_config", at, e.to_string()))?;
        model_config.validate().map_err(|e| field_err("model_config", at, e.to_string()))?;
        let at = r.pos;
        let meta: serde_json::Value =
            serde_json::from_slice(r.blob("meta")?).map_err(|e| field_err("meta", at, e.to_string()))?;

        let expected = param_shapes(&model_config);
        let at = r.pos;
        let count = r.u32()? as usize;
        if count != expected.count() {
            return Err(field_err("tensor_count", at, format!("{count} tensors, config implies {}", expected.count())));
        }
        let mut tensors = Vec::with_capacity(count);
        let mut want = Vec::new();
        expected.for_each(|n, s| want.push((n.to_string(), s.clone())));
        for (name, shape) in &want {
            let at = r.pos;
            let len = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(len)?).map_err(|_| field_err("tensor_name", at, "not UTF-8"))?;
            if got != name {
                return Err(field_err("tensor_name", at, format!("expected `{name}`, found `{got}`")));
            }
            let at = r.pos;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &dims != shape {
                return Err(field_err(name, at, format!("shape {dims:?}, config implies {shape:?}")));
            }
            tensors.push(read_values(&mut r, shape, name)?);
        }
        let mut it = tensors.into_iter();
        let params = expected.map(|_, _| it.next().expect("one tensor per entry"));

        let at = r.pos;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let skipped = r.u64()?;
                let m = expected.try_map(|n, s| read_values(&mut r, s, &format!("adam_m.{n}")))?;
                let v = expected.try_map(|n, s| read_values(&mut r, s, &format!("adam_v.{n}")))?;
                Some(OptimizerState { step, skipped, m, v })
            }
            f => return Err(field_err("optimizer_flag", at, format!("expected 0 or 1, found {f}"))),
        };
        let at = r.pos;
        let position = match r.u8()? {
            0 => None,
            1 => Some(TrainingPosition {
                seed: r.u64()?,
                epoch: r.u64()?,
                step_in_epoch: r.u64()?,
                global_step: r.u64()?,
                epoch_loss_sum: r.f64()?,
            }),
            f => return Err(field_err("position_flag", at, format!("expected 0 or 1, found {f}"))),
        };
        if r.remaining() != 0 {
            return Err(field_err("trailer", r.pos, format!("{} unexpected bytes", r.remaining())));
        }
        Ok(Self { model_config, params, optimizer, position, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

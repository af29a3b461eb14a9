//! Binary checkpoint: `LBSCKPT1`, u32 version, u64 metadata length, JSON
//! metadata, little-endian f32 payload, CRC32 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::NormStats;
use crate::diffcore::{ParamRegistry, Tensor};
use crate::error::{Error, Result};
use crate::ssm::LbsModel;

pub const MAGIC: &[u8; 8] = b"LBSCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub stats: NormStats,
    pub epoch: usize,
    pub best_val_loss: f64,
    #[serde(default)]
    pub run_config: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

/// Parsed file contents before binding to a model.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    /// Copies tensors into an already-declared registry by name, checking
    /// that every declared parameter is present with the same shape.
    pub fn restore_into(&self, reg: &mut ParamRegistry<f32>) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in reg.params_mut() {
            let t = by_name.get(p.name.as_str()).ok_or_else(|| Error::TensorShape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: vec![],
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::TensorShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = (*t).clone();
        }
        Ok(())
    }
}

pub fn encode_checkpoint(reg: &ParamRegistry<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut meta = meta.clone();
    let mut offset = 0;
    meta.tensors = reg
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(24 + json.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in reg.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(fail(0, "bad magic"));
    }
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(8, &format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let meta_end = 20usize.checked_add(meta_len).ok_or_else(|| fail(12, "metadata length overflows"))?;
    if bytes.len() < meta_end + 4 {
        return Err(fail(bytes.len(), "truncated metadata"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(fail(body_end, "checksum mismatch"));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| fail(20 + e.column(), &format!("bad metadata: {e}")))?;
    let payload = &bytes[meta_end..body_end];
    if !payload.len().is_multiple_of(4) {
        return Err(fail(meta_end, "payload is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for e in &meta.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n;
        if end > floats.len() {
            return Err(fail(meta_end + 4 * floats.len(), &format!("payload too short for tensor {}", e.name)));
        }
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), floats[e.offset..end].to_vec())));
    }
    Ok(RawCheckpoint { version, meta, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, reg: &ParamRegistry<f32>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(reg, meta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// A checkpoint bound to a freshly declared model of its stored config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LbsModel,
    pub registry: ParamRegistry<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.registry, &self.meta)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let raw = read_checkpoint(path)?;
    let mut registry = ParamRegistry::new();
    let model = LbsModel::declare(&mut registry, &raw.meta.config.model_config());
    raw.restore_into(&mut registry)?;
    Ok(Checkpoint {
        model,
        registry,
        meta: raw.meta,
    })
}

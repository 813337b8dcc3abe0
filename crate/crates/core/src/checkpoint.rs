//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VECO" | u32 version | u32 header length | header JSON
//! repeated: u32 name length | name | u8 rank | u64 dims[rank] | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Payload elements are `f32` unless the header's `storage` is `f64`.
//! Optimizer moments are stored as ordinary records named `adam.m.<param>`
//! and `adam.v.<param>`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::IteratorState;
use crate::model::{ModelConfig, ModelError, Precision, Veco};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VECO";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Optimizer moments aligned with the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn round_to_f32(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// JSON block following the version word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub storage: Precision,
    #[serde(default)]
    pub adam_step: Option<u64>,
    #[serde(default)]
    pub iterator: Option<IteratorState>,
    /// Free-form run metadata (resolved training config and the like).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    /// Parameters only, at step 0.
    pub fn from_model(model: &Veco, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                step: 0,
                seed,
                storage: model.config.storage,
                adam_step: None,
                iterator: None,
                extra: serde_json::Value::Null,
            },
            params: model.store.clone(),
            adam: None,
        }
    }

    pub fn model(&self) -> Result<Veco> {
        Ok(Veco::from_store(
            self.header.model.clone(),
            self.params.clone(),
        )?)
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = self.header.clone();
        header.adam_step = self.adam.as_ref().map(|a| a.step);
        let json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let storage = self.header.storage;
        for (_, name, t) in self.params.iter() {
            write_record(&mut out, name, t.shape(), t.data(), storage);
        }
        if let Some(adam) = &self.adam {
            for ((_, name, t), (m, v)) in self.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                write_record(&mut out, &format!("{ADAM_M}{name}"), t.shape(), m, storage);
                write_record(&mut out, &format!("{ADAM_V}{name}"), t.shape(), v, storage);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Tensor)> = Vec::new();
        while r.pos < body.len() {
            let (name, t) = r.record(header.storage)?;
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                moments.push((name, t));
            } else {
                if params.contains(&name) {
                    return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
                }
                params.insert(name, t);
            }
        }
        let adam = match header.adam_step {
            None if moments.is_empty() => None,
            None => {
                return Err(CheckpointError::Corrupt(
                    "optimizer moments without a step".into(),
                ))
            }
            Some(step) => {
                let mut state = AdamState::new(&params);
                let mut seen = 0;
                for (name, t) in moments {
                    let (prefix, slot) = if let Some(p) = name.strip_prefix(ADAM_M) {
                        (p, &mut state.m)
                    } else {
                        (&name[ADAM_V.len()..], &mut state.v)
                    };
                    let id = params.id(prefix).ok_or_else(|| {
                        CheckpointError::Corrupt(format!("moment for unknown parameter {prefix}"))
                    })?;
                    if params.get(id).shape() != t.shape() {
                        return Err(CheckpointError::Corrupt(format!(
                            "moment shape for {prefix}"
                        )));
                    }
                    slot[id.index()] = t.into_data();
                    seen += 1;
                }
                if seen != 2 * params.len() {
                    return Err(CheckpointError::Corrupt(format!(
                        "{seen} moment tensors for {} parameters",
                        params.len()
                    )));
                }
                state.step = step;
                Some(state)
            }
        };
        Ok(Checkpoint {
            header,
            params,
            adam,
        })
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], storage: Precision) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match storage {
        Precision::F32 => data
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Precision::F64 => data
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CheckpointError::Truncated(format!("need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self, storage: Precision) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} is too large")))?;
        let width = match storage {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let bytes = self.take(numel.saturating_mul(width))?;
        let data: Vec<f64> = match storage {
            Precision::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    // write-then-rename keeps an existing checkpoint intact on failure
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads and checks the stored model config against `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.header.model != expected {
        return Err(CheckpointError::ConfigMismatch(config_diff(
            &ckpt.header.model,
            expected,
        )));
    }
    Ok(ckpt)
}

fn config_diff(found: &ModelConfig, expected: &ModelConfig) -> String {
    let a = serde_json::to_value(found).unwrap_or_default();
    let b = serde_json::to_value(expected).unwrap_or_default();
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!(
                    "{k}: checkpoint {va}, expected {}",
                    b.get(k).unwrap_or(&serde_json::Value::Null)
                ));
            }
        }
    }
    diffs.join("; ")
}

/// Element-wise mean of the parameters of several checkpoints with identical
/// configs. Optimizer and iterator state are dropped.
pub fn average_checkpoints(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let first_path = paths
        .first()
        .ok_or_else(|| CheckpointError::ConfigMismatch("no checkpoints to average".into()))?;
    let mut acc = load_checkpoint(first_path.as_ref())?;
    let ids: Vec<_> = acc.params.ids().collect();
    for path in &paths[1..] {
        let other = load_checkpoint(path.as_ref())?;
        if other.header.model != acc.header.model {
            return Err(CheckpointError::ConfigMismatch(format!(
                "{}: {}",
                path.as_ref().display(),
                config_diff(&other.header.model, &acc.header.model)
            )));
        }
        if other.params.len() != acc.params.len() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "{} has {} tensors, expected {}",
                path.as_ref().display(),
                other.params.len(),
                acc.params.len()
            )));
        }
        for &id in &ids {
            let name = acc.params.name(id).to_string();
            let t = other
                .params
                .by_name(&name)
                .ok_or_else(|| CheckpointError::ConfigMismatch(format!("missing tensor {name}")))?;
            if t.shape() != acc.params.get(id).shape() {
                return Err(CheckpointError::ConfigMismatch(format!("shape of {name}")));
            }
            for (a, b) in acc.params.get_mut(id).data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        acc.header.step = acc.header.step.max(other.header.step);
    }
    let n = paths.len() as f64;
    for &id in &ids {
        acc.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|a| *a /= n);
    }
    if acc.header.storage == Precision::F32 {
        acc.params.round_to_f32();
    }
    acc.adam = None;
    acc.header.adam_step = None;
    acc.header.iterator = None;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Veco::init(small(), 1).unwrap();
        let mut c = Checkpoint::from_model(&m, 9);
        let mut adam = AdamState::new(&m.store);
        adam.step = 3;
        adam.m[2][1] = 0.25;
        adam.v[0][0] = 1.5;
        c.adam = Some(adam);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.header.adam_step, Some(3));
    }

    #[test]
    fn f64_storage_round_trip() {
        let cfg = ModelConfig {
            storage: Precision::F64,
            ..small()
        };
        let m = Veco::init(cfg, 2).unwrap();
        let c = Checkpoint::from_model(&m, 0);
        assert_eq!(
            Checkpoint::from_bytes(&c.to_bytes().unwrap())
                .unwrap()
                .params,
            m.store
        );
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = Veco::init(small(), 1).unwrap();
        let bytes = Checkpoint::from_model(&m, 0).to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(CheckpointError::Checksum { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::Checksum { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::Version { found: 2 })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE...."),
            Err(CheckpointError::BadMagic)
        ));
    }
}

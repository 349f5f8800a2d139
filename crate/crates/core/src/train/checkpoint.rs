//! Binary weight files.
//!
//! Layout (little-endian): magic `GAFARWTS`, format version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length and UTF-8 name, `u8`
//! rank, `u32` dims and row-major `f32` data. A CRC32 of every preceding
//! byte closes the file. Besides the network weights a checkpoint holds
//! the optimizer moments (`optim.*`), the epoch counter and a JSON echo of
//! the configuration stored byte-per-element in `meta.config`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig, Validation};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GAFARWTS";
pub const FORMAT_VERSION: u32 = 1;

const META_CONFIG: &str = "meta.config";
const META_EPOCH: &str = "meta.epoch";
const OPTIM_STEP: &str = "optim.step";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

/// Largest counter stored exactly in a 32-bit float.
const MAX_COUNTER: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    tool_version: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    validation: Option<Validation>,
    best: Option<Validation>,
}

/// Everything needed to use or resume a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: u64,
    /// Validation of these weights, when measured.
    pub validation: Option<Validation>,
    /// Best validation seen so far in the run that wrote this file.
    pub best: Option<Validation>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self { model, optimizer: None, train: None, epoch: 0, validation: None, best: None }
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes named tensors. Values are written as 32-bit floats.
pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| format_err(format!("rank too high for {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| format_err(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated weight file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weight file image, checking magic, version and checksum before
/// anything is decoded.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(format_err("truncated weight file"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err("not a weight file (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(format_err("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("tensor name is not UTF-8"))?.to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err("tensor too large"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(format_err("trailing bytes after last tensor"));
    }
    Ok(out)
}

fn counter(v: u64, what: &str) -> Result<Tensor> {
    if v >= MAX_COUNTER {
        return Err(format_err(format!("{what} {v} too large to store")));
    }
    Ok(Tensor::full(&[1, 1], v as f64))
}

/// The checkpoint as a weight file image.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        tool_version: crate::VERSION.to_string(),
        model: ckpt.model.config.clone(),
        train: ckpt.train.clone(),
        validation: ckpt.validation.clone(),
        best: ckpt.best.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut tensors: Vec<(String, Tensor)> =
        ckpt.model.params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
    tensors.push((META_CONFIG.into(), Tensor::new(vec![1, json.len()], json.iter().map(|&b| b as f64).collect())?));
    tensors.push((META_EPOCH.into(), counter(ckpt.epoch, "epoch")?));
    if let Some(opt) = &ckpt.optimizer {
        tensors.push((OPTIM_STEP.into(), counter(opt.step, "optimizer step")?));
        for (name, m) in &opt.m {
            tensors.push((format!("{OPTIM_M}{name}"), m.clone()));
        }
        for (name, v) in &opt.v {
            tensors.push((format!("{OPTIM_V}{name}"), v.clone()));
        }
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    encode_tensors(&tensors)
}

pub fn save_weights(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint with the architecture recorded in the file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = read(path.as_ref())?;
    checkpoint_from_bytes(&bytes, None)
}

/// Loads a checkpoint into the architecture `config`; any tensor that does
/// not fit is a shape error naming it.
pub fn load_weights_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Checkpoint> {
    let bytes = read(path.as_ref())?;
    checkpoint_from_bytes(&bytes, Some(config))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn take_counter(map: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Option<u64>> {
    match map.remove(name) {
        None => Ok(None),
        Some(t) if t.len() == 1 && t.item() >= 0.0 && t.item().fract() == 0.0 => Ok(Some(t.item() as u64)),
        Some(_) => Err(format_err(format!("malformed {name}"))),
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8], config: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut map: BTreeMap<String, Tensor> = decode_tensors(bytes)?.into_iter().collect();
    let meta_t = map.remove(META_CONFIG).ok_or_else(|| format_err("missing configuration record"))?;
    let json: Vec<u8> = meta_t
        .data()
        .iter()
        .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(format_err("malformed configuration record")) })
        .collect::<Result<_>>()?;
    let meta: Meta = serde_json::from_slice(&json).map_err(|e| format_err(format!("configuration record: {e}")))?;
    let epoch = take_counter(&mut map, META_EPOCH)?.unwrap_or(0);
    let step = take_counter(&mut map, OPTIM_STEP)?;

    let model_config = config.cloned().unwrap_or(meta.model);
    let mut model = Model::new(model_config, 0)?;
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        let t = map.remove(name).ok_or_else(|| Error::Shape(format!("weight file lacks tensor {name}")))?;
        model.params.set_value(name, t)?;
    }

    let mut optimizer = None;
    if let Some(step) = step {
        let cfg = meta.train.as_ref().map(|t| t.optimizer).unwrap_or_default();
        let mut opt = AdamW::new(cfg)?;
        opt.step = step;
        for (prefix, slot) in [(OPTIM_M, &mut opt.m), (OPTIM_V, &mut opt.v)] {
            let keys: Vec<String> = map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
            for key in keys {
                let t = map.remove(&key).expect("listed key");
                let name = &key[prefix.len()..];
                let p = model.params.get(name).map_err(|_| Error::Shape(format!("optimizer state for unknown tensor {name}")))?;
                if p.value.shape() != t.shape() {
                    return Err(Error::Shape(format!("optimizer state for {name} has shape {:?}", t.shape())));
                }
                slot.insert(name.to_string(), t);
            }
        }
        optimizer = Some(opt);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Shape(format!("weight file has unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, optimizer, train: meta.train, epoch, validation: meta.validation, best: meta.best })
}

//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (dtype, step, configs, tensor names and shapes), then every tensor's
//! values as little-endian scalars in header order. Values round-trip
//! bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneConfig, ModelState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::srm_fl::StyleNets;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SDGCKPT1";

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelState<T>,
    pub nets: StyleNets<T>,
    /// Resolved training configuration, kept opaque here.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    backbone: BackboneConfig,
    style_channels: usize,
    style_reduction: usize,
    train_config: Option<serde_json::Value>,
    tensors: Vec<TensorMeta>,
}

const GROUPS: [&str; 4] = ["params", "buffers", "ema", "style"];

fn groups<T>(c: &Checkpoint<T>) -> [&ParamSet<T>; 4] {
    [
        &c.model.params,
        &c.model.buffers,
        &c.model.ema,
        &c.nets.params,
    ]
}

pub fn encode<T: Scalar>(c: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    for (g, set) in GROUPS.iter().zip(groups(c)) {
        for (name, t) in set.iter() {
            tensors.push(TensorMeta {
                group: g.to_string(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
        }
    }
    let header = Header {
        dtype: T::DTYPE.into(),
        step: c.model.step,
        backbone: c.model.config.clone(),
        style_channels: c.nets.channels,
        style_reduction: c.nets.reduction,
        train_config: c.train_config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for set in groups(c) {
        for (_, t) in set.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut sets: [ParamSet<T>; 4] = Default::default();
    let mut pos = 16 + len;
    for meta in &header.tensors {
        let gi = GROUPS
            .iter()
            .position(|g| *g == meta.group)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group {:?}", meta.group)))?;
        let n: usize = meta.shape.iter().product();
        let end = pos + n * T::BYTES;
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        sets[gi].push(meta.name.clone(), Tensor::new(&meta.shape, data)?);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let [params, buffers, ema, style] = sets;
    if !params.same_layout(&ema) {
        return Err(bad("EMA shadow does not match the live parameters"));
    }
    Ok(Checkpoint {
        model: ModelState {
            config: header.backbone,
            params,
            buffers,
            ema,
            step: header.step,
        },
        nets: StyleNets {
            channels: header.style_channels,
            reduction: header.style_reduction,
            params: style,
        },
        train_config: header.train_config,
    })
}

pub fn save_checkpoint<T: Scalar>(c: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(c)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

/// Dtype tag stored in a checkpoint file, without decoding tensors.
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice::<Header>(body)?.dtype)
}

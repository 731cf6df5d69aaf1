//! Checkpoint files: one line of JSON header, then little-endian `f32` parameter data.
//!
//! The header lists every tensor's name, shape and byte offset into the data section, the
//! network config, training metadata and a mandatory `format_version`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fusion::FusionWeight;
use super::network::{Network, NetworkConfig, ParamSet};
use crate::autodiff::{Real, Tensor};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Which point of the staged schedule produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    /// Freshly initialized, never trained.
    Init,
    /// Teacher classifier used to produce soft targets.
    Teacher,
    /// Backbone and SPP after the distillation stage.
    Distilled,
    /// After aesthetic distribution training.
    Aesthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub stage: StageTag,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    metadata: CheckpointMeta,
    fusion_weight: Option<FusionWeight>,
    tensors: Vec<TensorEntry>,
    data_bytes: usize,
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(net.params().len());
    let mut data = Vec::with_capacity(net.params().num_values() * 4);
    for (name, t) in net.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for v in t.data() {
            data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: net.config().clone(),
        metadata: *meta,
        fusion_weight: net.fusion(),
        tensors,
        data_bytes: data.len(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Network<T>, CheckpointMeta)> {
    let corrupt = |msg: String| Error::CorruptCheckpoint(msg);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header terminator".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..split])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header has no format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| corrupt(format!("malformed header: {e}")))?;
    let data = &bytes[split + 1..];
    if data.len() != header.data_bytes {
        return Err(corrupt(format!(
            "expected {} data bytes, found {}",
            header.data_bytes,
            data.len()
        )));
    }
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset + 4 * n;
        if end > data.len() {
            return Err(corrupt(format!("tensor `{}` runs past the data section", t.name)));
        }
        let values = data[t.offset..end]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        entries.push((t.name.clone(), Tensor::new(t.shape.clone(), values)?));
    }
    let mut net = Network::from_params(header.config, ParamSet::new(entries))?;
    net.set_fusion(header.fusion_weight);
    Ok((net, header.metadata))
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    decode_checkpoint(&std::fs::read(path)?)
}

//! Binary checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, the
//! tensors as little-endian `f64` in manifest order, and a trailing SHA-256
//! of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use coa_autodiff::{AdamWConfig, AdamWState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BoundingBox, NormStats};
use crate::error::{CoaError, Result};
use crate::model::{check_params, ModelConfig, Policy};
use crate::sim::TaskSpec;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

/// Where the per-iteration random streams resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub norm_stats: NormStats,
    /// Box around the training objects' positions, for split evaluation.
    pub train_bbox: Option<BoundingBox>,
    pub params: ParamStore,
    pub optimizer: AdamWState,
    pub iteration: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn policy(&self) -> Result<Policy> {
        Policy::from_params(self.model.clone(), self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    task: TaskSpec,
    norm_stats: NormStats,
    train_bbox: Option<BoundingBox>,
    iteration: u64,
    rng: RngState,
    optimizer_config: AdamWConfig,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

fn err(m: impl Into<String>) -> CoaError {
    CoaError::Checkpoint(m.into())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor)> = ck.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    for (prefix, map) in [(MOMENT1, &ck.optimizer.first_moment), (MOMENT2, &ck.optimizer.second_moment)] {
        named.extend(map.iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
    }
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        model: ck.model.clone(),
        train: ck.train.clone(),
        task: ck.task.clone(),
        norm_stats: ck.norm_stats.clone(),
        train_bbox: ck.train_bbox,
        iteration: ck.iteration,
        rng: ck.rng,
        optimizer_config: ck.optimizer.config,
        optimizer_step: ck.optimizer.step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 8 + 32);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + 32 {
        return Err(err(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("checksum mismatch (truncated or corrupted file)"));
    }
    let hlen = u64::from_le_bytes(body[..8].try_into().expect("8 bytes")) as usize;
    if body.len() < 8 + hlen {
        return Err(err("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[8..8 + hlen]).map_err(|e| err(format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "format version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let blob = &body[8 + hlen..];
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(err(format!("expected {} tensor bytes, found {}", total * 8, blob.len())));
    }
    let mut params = ParamStore::new();
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| err(format!("tensor {} lies outside the data section", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if let Some(n) = e.name.strip_prefix(MOMENT1) {
            m1.insert(n.to_string(), t);
        } else if let Some(n) = e.name.strip_prefix(MOMENT2) {
            m2.insert(n.to_string(), t);
        } else {
            params.insert(e.name.clone(), t)?;
        }
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        task: header.task,
        norm_stats: header.norm_stats,
        train_bbox: header.train_bbox,
        params,
        optimizer: AdamWState {
            config: header.optimizer_config,
            step: header.optimizer_step,
            first_moment: m1,
            second_moment: m2,
        },
        iteration: header.iteration,
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CoaError::io(path, e))
}

/// Reads a checkpoint and validates its parameters against its own model
/// config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoaError::io(path, e))?;
    let ck = decode_checkpoint(&bytes)?;
    check_params(&ck.model, &ck.params).map_err(|e| err(e.to_string()))?;
    Ok(ck)
}

/// Reads a checkpoint whose parameters must fit `model` instead of the
/// stored config.
pub fn load_checkpoint_as(path: impl AsRef<Path>, model: &ModelConfig) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoaError::io(path, e))?;
    let mut ck = decode_checkpoint(&bytes)?;
    check_params(model, &ck.params).map_err(|e| err(format!("shape mismatch: {e}")))?;
    ck.model = model.clone();
    Ok(ck)
}

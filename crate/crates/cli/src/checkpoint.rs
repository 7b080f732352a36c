//! Training checkpoints: a JSON manifest line followed by every parameter,
//! normalization buffer and Adam moment as little-endian f64, in manifest
//! order. The manifest carries a SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trimodal_core::diffmath::Tensor;
use trimodal_core::model::ModelParams;
use trimodal_core::trainer::{OptimState, TrainConfig, TrainState};

use crate::blob;
use crate::error::{CliError, Result};

pub const FORMAT: &str = "trimodal-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub dtype: String,
    pub config: TrainConfig,
    pub entries: Vec<Entry>,
    pub payload_bytes: usize,
    pub sha256: String,
}

pub fn file_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

pub fn path_for(dir: &Path, step: u64) -> PathBuf {
    dir.join(file_name(step))
}

pub fn save(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let groups: [(EntryKind, &BTreeMap<String, Tensor>); 4] = [
        (EntryKind::Param, state.params.as_map()),
        (EntryKind::Buffer, state.params.buffers()),
        (EntryKind::AdamM, &state.optim.m),
        (EntryKind::AdamV, &state.optim.v),
    ];
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (kind, map) in groups {
        for (name, t) in map {
            entries.push(Entry { name: name.clone(), kind, shape: t.shape().to_vec() });
            payload.extend(blob::f64_bytes(t.data().iter().copied()));
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: state.optim.step,
        dtype: "f64le".into(),
        config: config.clone(),
        entries,
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    blob::write(path, &manifest, &payload)
}

/// Reads and verifies a checkpoint; any mismatch is an integrity error.
pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bad = |m: String| CliError::Integrity(format!("{}: {m}", path.display()));
    let (manifest, payload): (Manifest, Vec<u8>) = blob::read(path)?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f64le" {
        return Err(bad(format!("unsupported format {} v{} {}", manifest.format, manifest.version, manifest.dtype)));
    }
    if payload.len() != manifest.payload_bytes || hex(&Sha256::digest(&payload)) != manifest.sha256 {
        return Err(bad("payload does not match its checksum".into()));
    }
    let values = blob::f64_values(&payload)?;
    let mut at = 0;
    let mut maps: [BTreeMap<String, Tensor>; 4] = Default::default();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let data = values.get(at..at + n).ok_or_else(|| bad("payload shorter than manifest".into()))?;
        at += n;
        let t = Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| bad(err.to_string()))?;
        let slot = match e.kind {
            EntryKind::Param => 0,
            EntryKind::Buffer => 1,
            EntryKind::AdamM => 2,
            EntryKind::AdamV => 3,
        };
        if maps[slot].insert(e.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate entry {}", e.name)));
        }
    }
    if at != values.len() {
        return Err(bad("payload longer than manifest".into()));
    }
    let [params, buffers, m, v] = maps;
    let params = ModelParams::from_parts(params, buffers).map_err(|e| bad(e.to_string()))?;
    params.check(&manifest.config.model).map_err(|e| bad(e.to_string()))?;
    let optim = OptimState { m, v, step: manifest.step, config: manifest.config.adam.clone() };
    optim.check(&params).map_err(|e| bad(e.to_string()))?;
    Ok((manifest.config, TrainState { params, optim }))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Checkpoint format: a JSON manifest (`<stem>.json`) plus a raw payload
//! (`<stem>.bin`) of little-endian 64-bit floats.
//!
//! The payload holds, in order: every parameter tensor (in the model's
//! documented parameter order), then every first-moment tensor, then every
//! second-moment tensor, each in the same order. The manifest records the
//! parameter names and shapes, so a reader can locate any tensor without
//! heuristics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::model::{ModelConfig, ResUnet3d};
use crate::net::optim::{OptimConfig, OptimState};
use crate::net::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "skullrecon-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epoch: usize,
    /// Optimizer step counter (for bias correction on resume).
    pub optim_step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Payload layout: params, then first moments, then second moments.
    pub layout: String,
    pub params: Vec<ParamEntry>,
}

fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save_checkpoint(
    stem: &Path,
    model: &ResUnet3d<f64>,
    state: &OptimState<f64>,
    epoch: usize,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f64le".into(),
        model: model.config().clone(),
        optim: state.cfg.clone(),
        epoch,
        optim_step: state.step,
        seed,
        config_hash: config_hash.into(),
        layout: "params,m,v".into(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
            })
            .collect(),
    };
    let mut payload: Vec<u8> = Vec::new();
    let mut write_tensors = |tensors: &mut dyn Iterator<Item = &Tensor<f64>>| {
        for t in tensors {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    };
    write_tensors(&mut model.params().iter().map(|p| &p.value));
    write_tensors(&mut state.m.iter());
    write_tensors(&mut state.v.iter());

    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::FormatError(format!("manifest serialization: {e}")))?;
    fs::write(json_path(stem), text)?;
    fs::write(bin_path(stem), payload)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(ResUnet3d<f64>, OptimState<f64>, CheckpointManifest)> {
    let text = fs::read_to_string(json_path(stem))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::FormatError(format!("bad checkpoint manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::FormatError(format!(
            "unsupported checkpoint format '{}'",
            manifest.format
        )));
    }
    if manifest.dtype != "f64le" {
        return Err(Error::FormatError(format!(
            "unsupported checkpoint dtype '{}'",
            manifest.dtype
        )));
    }
    let payload = fs::read(bin_path(stem))?;

    let mut model = ResUnet3d::<f64>::new(&manifest.model, 0)?;
    if model.params().len() != manifest.params.len() {
        return Err(Error::DimensionError(format!(
            "manifest lists {} parameters, model config implies {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for (p, e) in model.params().iter().zip(manifest.params.iter()) {
        if p.name != e.name || p.value.shape() != e.shape {
            return Err(Error::DimensionError(format!(
                "parameter mismatch: model has {} {:?}, manifest has {} {:?}",
                p.name,
                p.value.shape(),
                e.name,
                e.shape
            )));
        }
    }
    let total: usize = manifest
        .params
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let expected_bytes = total * 3 * 8;
    if payload.len() != expected_bytes {
        return Err(Error::DimensionError(format!(
            "payload has {} bytes, manifest implies {}",
            payload.len(),
            expected_bytes
        )));
    }

    let mut offset = 0usize;
    let mut read_into = |t: &mut Tensor<f64>| {
        for v in t.data_mut() {
            let bytes: [u8; 8] = payload[offset..offset + 8].try_into().expect("size checked");
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    };
    for p in model.params_mut() {
        read_into(&mut p.value);
    }
    let shapes: Vec<[usize; 5]> = manifest.params.iter().map(|e| e.shape).collect();
    let mut state = OptimState::<f64>::new(manifest.optim.clone(), &shapes)?;
    for m in state.m.iter_mut() {
        read_into(m);
    }
    for v in state.v.iter_mut() {
        read_into(v);
    }
    state.step = manifest.optim_step;

    Ok((model, state, manifest))
}

//! Checkpoint directories: `config.json`, `weights.bin` (little-endian f32,
//! tensors concatenated) and `manifest.json` listing tensor names, shapes
//! and offsets.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, TensorSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_DTYPE: &str = "float32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub dtype: String,
    pub num_values: usize,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile<C> {
    kind: String,
    config: C,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Loaded checkpoint contents before they are bound to a model.
#[derive(Debug, Clone)]
pub struct RawCheckpoint<C> {
    pub config: C,
    pub metadata: serde_json::Value,
    pub manifest: Manifest,
    pub values: Vec<f64>,
}

pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    params: &ParamStore,
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = ConfigFile {
        kind: kind.to_string(),
        config,
        metadata,
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&cfg)?)?;
    let manifest = Manifest {
        kind: kind.to_string(),
        dtype: WEIGHTS_DTYPE.to_string(),
        num_values: params.len(),
        tensors: params.specs().to_vec(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let bytes: Vec<u8> = params
        .values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    Ok(())
}

pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<RawCheckpoint<C>> {
    let missing = |f: &str| Error::ModelMissing(dir.join(f).display().to_string());
    let read = |f: &str| fs::read(dir.join(f)).map_err(|_| missing(f));
    let cfg: ConfigFile<C> = serde_json::from_slice(&read(CONFIG_FILE)?)?;
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
    if cfg.kind != kind || manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model, expected {kind:?}",
            dir.display(),
            cfg.kind
        )));
    }
    if manifest.dtype != WEIGHTS_DTYPE {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let bytes = read(WEIGHTS_FILE)?;
    if bytes.len() != 4 * manifest.num_values {
        return Err(Error::Checkpoint(format!(
            "weights.bin has {} bytes, manifest expects {}",
            bytes.len(),
            4 * manifest.num_values
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(RawCheckpoint {
        config: cfg.config,
        metadata: cfg.metadata,
        manifest,
        values,
    })
}

/// Rounds every parameter through f32 so in-memory models match what a
/// checkpoint round trip would produce.
pub fn quantize_f32(params: &mut ParamStore) {
    params.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub(crate) fn bind(params: &mut ParamStore, manifest: &Manifest, values: Vec<f64>) -> Result<()> {
    params
        .load(&manifest.tensors, values)
        .map_err(Error::Checkpoint)?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(())
}

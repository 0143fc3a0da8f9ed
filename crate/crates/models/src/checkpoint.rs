//! Versioned checkpoint container.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! <dir>/meta.json            version, kind, config + fingerprint, step, seed
//! <dir>/params.safetensors   parameter blobs keyed by layer path
//! <dir>/optim.safetensors    Adam moments (present when training state is saved)
//! ```

use candle_core::{Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{ModelError, Result};
use crate::optim::AdamW;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// `forecaster`, `vae` or `dit`.
    pub kind: String,
    pub config_fingerprint: String,
    pub config_json: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    /// Forecast step size this model was trained for.
    pub lead_hours: Option<u32>,
    /// Codec identity for VAE checkpoints.
    pub codec_id: Option<String>,
    pub optimizer_step: Option<u64>,
}

/// SHA-256 over the canonical JSON of a config.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    varmap: &VarMap,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut meta = meta.clone();
    meta.version = CHECKPOINT_VERSION;
    meta.optimizer_step = optimizer.map(|o| o.step_count());
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    varmap.save(dir.join("params.safetensors"))?;
    if let Some(opt) = optimizer {
        let named: Vec<(String, Tensor)> = opt.state_tensors();
        let map: HashMap<String, Tensor> = named.into_iter().collect();
        candle_core::safetensors::save(&map, dir.join("optim.safetensors"))?;
    }
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let json = std::fs::read_to_string(dir.join("meta.json")).map_err(|e| {
        ModelError::Checkpoint(format!("cannot read {}: {e}", dir.join("meta.json").display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&json)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    Ok(meta)
}

/// Loads parameters into an already-constructed model's `VarMap`, rejecting
/// checkpoints whose config fingerprint disagrees with `expected`.
pub fn load_params(dir: &Path, varmap: &mut VarMap, expected_fingerprint: &str) -> Result<CheckpointMeta> {
    let meta = load_meta(dir)?;
    if meta.config_fingerprint != expected_fingerprint {
        return Err(ModelError::Checkpoint(format!(
            "config fingerprint mismatch: checkpoint {} vs model {}",
            meta.config_fingerprint, expected_fingerprint
        )));
    }
    varmap.load(dir.join("params.safetensors"))?;
    Ok(meta)
}

pub fn load_optimizer(dir: &Path, optimizer: &mut AdamW, dev: &Device) -> Result<()> {
    let meta = load_meta(dir)?;
    let path = dir.join("optim.safetensors");
    if !path.exists() {
        return Err(ModelError::Checkpoint(
            "checkpoint has no optimizer state".into(),
        ));
    }
    let tensors = candle_core::safetensors::load(&path, dev)?;
    optimizer.restore_state(meta.optimizer_step.unwrap_or(meta.step), tensors)?;
    Ok(())
}

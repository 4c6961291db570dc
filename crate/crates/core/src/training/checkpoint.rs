//! `ckpt/<iter>/params.safetensors` plus `ckpt/<iter>/manifest.json`. A
//! checkpoint directory is assembled under a temporary name and renamed
//! into place, so readers never observe a half-written one.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub iteration: u64,
    pub config_hash: String,
    #[serde(default)]
    pub params_sha256: String,
    /// Optimizer step counts keyed by optimizer prefix.
    pub adam_steps: BTreeMap<String, u64>,
    /// Batches and masks are drawn from `(seed, iteration)`, so this pair is
    /// the whole sampling state.
    pub seed: u64,
    pub next_r1: u64,
    #[serde(default)]
    pub diagnostic: Option<String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub manifest: CheckpointManifest,
    pub tensors: HashMap<String, Tensor>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

pub fn save_checkpoint(dir: &Path, tensors: &HashMap<String, Tensor>, manifest: &CheckpointManifest) -> Result<PathBuf> {
    let parent = dir.parent().ok_or_else(|| ckpt_err(dir, "checkpoint path has no parent"))?;
    fs::create_dir_all(parent)?;
    let name = dir.file_name().ok_or_else(|| ckpt_err(dir, "checkpoint path has no name"))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let params_path = tmp.join(PARAMS_FILE);
    candle_core::safetensors::save(tensors, &params_path)?;
    let bytes = fs::read(&params_path)?;
    let mut manifest = manifest.clone();
    manifest.params_sha256 = hex::encode(Sha256::digest(&bytes));
    fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(dir.to_path_buf())
}

/// Read and verify a checkpoint. The parameter file must match the recorded
/// digest; a different model configuration is refused unless `force` is set.
pub fn load_checkpoint(dir: &Path, expected_hash: Option<&str>, force: bool, device: &Device) -> Result<Checkpoint> {
    let manifest_text =
        fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| ckpt_err(dir, format!("cannot read manifest: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&manifest_text).map_err(|e| ckpt_err(dir, format!("malformed manifest: {e}")))?;
    let bytes = fs::read(dir.join(PARAMS_FILE)).map_err(|e| ckpt_err(dir, format!("cannot read parameters: {e}")))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.params_sha256 {
        return Err(ckpt_err(dir, format!("parameter digest {digest} does not match manifest {}", manifest.params_sha256)));
    }
    if let Some(h) = expected_hash {
        if h != manifest.config_hash && !force {
            return Err(ckpt_err(
                dir,
                format!("checkpoint was written for config {}, current config is {h}; pass force to override", manifest.config_hash),
            ));
        }
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| ckpt_err(dir, format!("cannot decode parameters: {e}")))?;
    Ok(Checkpoint { path: dir.to_path_buf(), manifest, tensors })
}

/// Numbered checkpoint directories under `root`, ascending.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if let Some(n) = entry.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(MANIFEST_FILE).exists() {
                out.push((n, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

//! Single-file checkpoints: every named tensor plus the model config.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::config::ModelConfig;
use crate::detector::Detector;
use crate::error::{ModelError, Result};

pub const FORMAT_TAG: &str = "hgdet-checkpoint-v1";
const KEY_FORMAT: &str = "format";
const KEY_CONFIG: &str = "config";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

/// Write all parameters and buffers (as f32) with the config echoed in the header.
pub fn save(model: &Detector, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in model.store().vars() {
        tensors.push((name, var.as_tensor().to_dtype(DType::F32)?));
    }
    for (name, t) in model.store().buffers() {
        tensors.push((name, t.to_dtype(DType::F32)?));
    }
    let meta = HashMap::from([
        (KEY_FORMAT.to_string(), FORMAT_TAG.to_string()),
        (KEY_CONFIG.to_string(), serde_json::to_string(model.config())?),
    ]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| ModelError::Io { path: dir.to_path_buf(), source })?;
    }
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), path)
        .map_err(|source| ModelError::Safetensors { path: path.to_path_buf(), source })
}

/// Read the config echoed in a checkpoint header.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    config_from_bytes(path, &bytes)
}

fn config_from_bytes(path: &Path, bytes: &[u8]) -> Result<ModelConfig> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|source| ModelError::Safetensors { path: path.to_path_buf(), source })?;
    let meta = header.metadata().as_ref().ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    match meta.get(KEY_FORMAT) {
        Some(tag) if tag == FORMAT_TAG => {}
        Some(tag) => return Err(ckpt_err(path, format!("unsupported format {tag:?}, expected {FORMAT_TAG:?}"))),
        None => return Err(ckpt_err(path, "missing format tag")),
    }
    let cfg = meta.get(KEY_CONFIG).ok_or_else(|| ckpt_err(path, "missing config"))?;
    Ok(serde_json::from_str(cfg)?)
}

/// Rebuild a trainable detector from a checkpoint.
pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Detector> {
    load_with(path, |cfg| Detector::new(cfg, dtype, device, 0))
}

/// Rebuild an inference-only detector (see [`Detector::inference`]).
pub fn load_inference(path: &Path, dtype: DType, device: &Device) -> Result<Detector> {
    load_with(path, |cfg| Detector::inference(cfg, dtype, device, 0))
}

fn load_with(path: &Path, build: impl FnOnce(ModelConfig) -> Result<Detector>) -> Result<Detector> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let model = build(config_from_bytes(path, &bytes)?)?;
    load_into(&model, path, &bytes)?;
    Ok(model)
}

/// Copy tensors from a safetensors file into the tensors of the same name,
/// e.g. pretrained backbone weights. A file tensor named `x` also matches
/// `backbone.x`, so torchvision-style exports load without renaming. Returns
/// the number of tensors loaded; shape mismatches are errors.
pub fn load_matching(model: &Detector, path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, model.device())?;
    let known: std::collections::HashSet<String> = model
        .store()
        .vars()
        .into_iter()
        .map(|(n, _)| n)
        .chain(model.store().buffers().into_iter().map(|(n, _)| n))
        .collect();
    let mut loaded = 0;
    for (name, t) in &tensors {
        let target = if known.contains(name) {
            name.clone()
        } else {
            let prefixed = format!("backbone.{name}");
            if !known.contains(&prefixed) {
                continue;
            }
            prefixed
        };
        model.store().assign(&target, t).map_err(|e| ckpt_err(path, e.to_string()))?;
        loaded += 1;
    }
    Ok(loaded)
}

fn load_into(model: &Detector, path: &Path, bytes: &[u8]) -> Result<()> {
    let tensors = candle_core::safetensors::load_buffer(bytes, model.device())?;
    let names = model
        .store()
        .vars()
        .into_iter()
        .map(|(n, _)| n)
        .chain(model.store().buffers().into_iter().map(|(n, _)| n));
    for name in names {
        let t = tensors.get(&name).ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))?;
        model.store().assign(&name, t).map_err(|e| ckpt_err(path, e.to_string()))?;
    }
    Ok(())
}

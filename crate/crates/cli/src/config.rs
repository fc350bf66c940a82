//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hgdet_core::data::{AugmentationConfig, StainTag};
use hgdet_model::{LossConfig, ModelConfig};
use serde::{Deserialize, Serialize};

/// Where training data lives. Without a validation set, a seeded fraction of
/// the training images is held out.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub val_annotations: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Linear ramp from `lr / 100` to `lr` over these epochs, then constant.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; `None` or 0 disables.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Keep only images with this stain.
    pub stain: Option<StainTag>,
    /// Optional safetensors file with pretrained tensors (matched by name).
    pub pretrained: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 4e-4,
            batch_size: 4,
            epochs: 50,
            warmup_epochs: 15,
            clip_norm: Some(1.0),
            seed: 0,
            stain: None,
            pretrained: None,
            data: DataConfig {
                val_fraction: 0.1,
                ..Default::default()
            },
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: TrainConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("lr must be positive, got {}", self.lr);
        }
        if self.weight_decay < 0.0 {
            bail!("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!("batch_size and epochs must be at least 1");
        }
        if self.warmup_epochs > self.epochs {
            bail!("warmup_epochs ({}) exceeds epochs ({})", self.warmup_epochs, self.epochs);
        }
        if let Some(c) = self.clip_norm {
            if !(c >= 0.0) {
                bail!("clip_norm must be non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!("val_fraction must lie in [0, 1)");
        }
        self.model.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.warmup_epochs || self.warmup_epochs == 0 {
            return self.lr;
        }
        let start = self.lr / 100.0;
        start + (self.lr - start) * epoch as f64 / self.warmup_epochs as f64
    }
}

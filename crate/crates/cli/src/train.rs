//! Training loop: warm-up schedule, clipping, validation and checkpointing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use hgdet_core::data::{augment, letterbox, Sample};
use hgdet_core::matching::LossBreakdown;
use hgdet_core::BoxN;
use hgdet_model::{checkpoint, Detector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub seconds: f64,
}

/// Everything needed to audit a run. Rewritten after every epoch; earlier
/// epochs are never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    /// SHA-256 of the decoded training and validation samples.
    pub dataset_hashes: BTreeMap<String, String>,
    pub n_train: usize,
    pub n_val: usize,
    pub num_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    /// Model state after the last epoch.
    pub model: Detector,
    pub best_checkpoint: PathBuf,
}

/// Content hash of a sample list (pixels, boxes and ids), independent of file encoding.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.image_id.to_le_bytes());
        h.update((s.image.width as u64).to_le_bytes());
        h.update((s.image.height as u64).to_le_bytes());
        for v in &s.image.data {
            h.update(v.to_le_bytes());
        }
        for b in &s.gts {
            for v in b.to_array() {
                h.update(v.to_le_bytes());
            }
        }
    }
    format!("{:x}", h.finalize())
}

fn fit(samples: &[Sample], (w, h): (usize, usize)) -> Vec<Sample> {
    samples.iter().map(|s| letterbox(s, w, h).0).collect()
}

#[derive(Default)]
struct Mean {
    sum: [f64; 5],
    n: usize,
}

impl Mean {
    fn add(&mut self, b: &LossBreakdown, count: usize) {
        let v = [b.heatmap, b.cls, b.l1, b.iou, b.total];
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x * count as f64;
        }
        self.n += count;
    }

    fn get(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            heatmap: self.sum[0] / n,
            cls: self.sum[1] / n,
            l1: self.sum[2] / n,
            iou: self.sum[3] / n,
            total: self.sum[4] / n,
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(vars: &[Var], grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn batch_loss(
    model: &Detector,
    cfg: &TrainConfig,
    batch: &[&Sample],
) -> Result<hgdet_model::LossOutput> {
    let x = model.preprocess(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let gts: Vec<Vec<BoxN>> = batch.iter().map(|s| s.gts.clone()).collect();
    let (_, loss) = model.forward_loss(&x, &gts, &cfg.loss)?;
    Ok(loss)
}

/// Mean loss over a sample list without augmentation or updates.
pub fn evaluate_loss(model: &Detector, cfg: &TrainConfig, samples: &[Sample]) -> Result<LossBreakdown> {
    let mut mean = Mean::default();
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        mean.add(&batch_loss(model, cfg, &refs)?.breakdown, chunk.len());
    }
    Ok(mean.get())
}

fn write_manifest(run_dir: &Path, m: &RunManifest) -> Result<()> {
    let path = run_dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(m)?).with_context(|| format!("writing {}", path.display()))
}

/// Train on `train`, selecting the checkpoint with the lowest validation
/// loss (training loss when `val` is empty). All outputs go to `run_dir`.
pub fn train(cfg: &TrainConfig, train: &[Sample], val: &[Sample], run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<Sample> = train.iter().filter(|s| s.matches_stain(cfg.stain)).cloned().collect();
    let val: Vec<Sample> = val.iter().filter(|s| s.matches_stain(cfg.stain)).cloned().collect();
    if train.is_empty() {
        bail!("no training images left after the stain filter {:?}", cfg.stain);
    }
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let train = fit(&train, cfg.model.input_size);
    let val = fit(&val, cfg.model.input_size);

    let model = Detector::new(cfg.model.clone(), DType::F32, &Device::Cpu, cfg.seed)?;
    if let Some(p) = &cfg.pretrained {
        let n = checkpoint::load_matching(&model, p)?;
        log::info!("loaded {n} pretrained tensors from {}", p.display());
    }
    let vars: Vec<Var> = model.store().vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.lr_at(0),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;

    let mut manifest = RunManifest {
        config: cfg.clone(),
        dataset_hashes: BTreeMap::from([
            ("train".to_string(), dataset_hash(&train)),
            ("val".to_string(), dataset_hash(&val)),
        ]),
        n_train: train.len(),
        n_val: val.len(),
        num_parameters: model.store().num_parameters(),
        epochs: Vec::new(),
        best_epoch: None,
        best_checkpoint: None,
    };
    log::info!(
        "training on {} images ({} validation), {} parameters",
        train.len(),
        val.len(),
        manifest.num_parameters
    );

    let best_path = run_dir.join(BEST_CHECKPOINT);
    let mut best = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut mean = Mean::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| augment(&train[i], &cfg.augmentation, &mut rng)).collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let loss = batch_loss(&model, cfg, &refs)?;
            if !loss.breakdown.total.is_finite() {
                let ids: Vec<u64> = batch.iter().map(|s| s.image_id).collect();
                let dump = run_dir.join("nonfinite_batch.json");
                let diag = serde_json::json!({ "epoch": epoch, "image_ids": ids, "loss": loss.breakdown });
                std::fs::write(&dump, serde_json::to_string_pretty(&diag)?)?;
                bail!("non-finite loss at epoch {epoch} on images {ids:?}; details in {}", dump.display());
            }
            let mut grads = loss.total.backward()?;
            if let Some(max) = cfg.clip_norm.filter(|&c| c > 0.0) {
                clip_grad_norm(&vars, &mut grads, max)?;
            }
            opt.step(&grads)?;
            mean.add(&loss.breakdown, batch.len());
        }
        let train_loss = mean.get();
        let val_loss = if val.is_empty() { None } else { Some(evaluate_loss(&model, cfg, &val)?) };
        let score = val_loss.as_ref().unwrap_or(&train_loss).total;
        if score < best {
            best = score;
            checkpoint::save(&model, &best_path)?;
            manifest.best_epoch = Some(epoch);
            manifest.best_checkpoint = Some(best_path.clone());
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train: train_loss,
            val: val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>4} lr {lr:.2e} train {:.4} (hm {:.4} cls {:.4} l1 {:.4} iou {:.4}) val {} [{:.1}s]",
            rec.train.total,
            rec.train.heatmap,
            rec.train.cls,
            rec.train.l1,
            rec.train.iou,
            rec.val.map_or("-".to_string(), |v| format!("{:.4}", v.total)),
            rec.seconds
        );
        manifest.epochs.push(rec);
        write_manifest(run_dir, &manifest)?;
    }
    checkpoint::save(&model, &run_dir.join(LAST_CHECKPOINT))?;
    Ok(TrainOutcome {
        manifest,
        model,
        best_checkpoint: best_path,
    })
}

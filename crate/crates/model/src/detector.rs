//! The full detector: backbone, c4 block, pyramid, heatmap head, memory,
//! query initialization and decoder.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Linear};
use hgdet_core::data::Image;
use hgdet_core::geometry::BoxN;
use hgdet_core::heatmap::{pool_nms_topk, render_target, FocalParams, HeatmapGrid, HeatmapKind, Peak};
use hgdet_core::matching::{
    build_cost, hungarian_assign, CostWeights, LossBreakdown, LossWeights, MatchAssignment, QueryPrediction,
};
use hgdet_core::Detection;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, C4Block, FeaturePyramid, Fpn};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::error::{ModelError, Result};
use crate::loss::{ciou_loss, decode_boxes, heatmap_focal, l1_loss, query_focal};
use crate::nn::{conv2d, linear, ConvSpec};
use crate::params::{Init, ParamStore};
use crate::pe::pe_tensor;
use crate::query::{init_queries, QuerySet};

/// Heatmap head bias: initial foreground probability of about 0.1.
const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// Everything produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(B, H/4, W/4)` heatmap logits.
    pub heatmap: Tensor,
    pub queries: QuerySet,
    /// `(B, K)` foreground logits.
    pub logits: Tensor,
    /// `(B, K, 4)` raw offsets.
    pub deltas: Tensor,
    /// `(B, K, 4)` decoded, clipped `(cx, cy, w, h)`.
    pub boxes: Tensor,
    /// Memory token count.
    pub memory_len: usize,
}

/// Loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub weights: LossWeights,
    pub cost: CostWeights,
}

/// Batch-mean loss and its parts.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub struct Detector {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    c4_block: C4Block,
    fpn: Fpn,
    hm_conv: Conv2d,
    hm_out: Conv2d,
    psi: [Linear; 3],
    phi: Linear,
    decoder: Decoder,
}

impl Detector {
    /// Trainable model: forward passes record the autograd graph.
    pub fn new(cfg: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(dtype, device.clone()), seed)
    }

    /// Inference-only model. Forward passes keep no autograd graph, which
    /// bounds memory at large inputs; gradients with respect to its
    /// parameters are unavailable.
    pub fn inference(cfg: ModelConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        Self::with_store(cfg, ParamStore::untracked(dtype, device.clone()), seed)
    }

    fn with_store(cfg: ModelConfig, store: ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Init::new(&store, seed);
        let d = cfg.d;
        let backbone = Backbone::new(&root.pp("backbone"), &cfg)?;
        let c4_block = C4Block::new(&root.pp("c4_block"), cfg.c4_channels(), cfg.c4_heads, cfg.c4_ffn_mult)?;
        let fpn = Fpn::new(&root.pp("fpn"), Backbone::channels(&cfg), d)?;
        let hm = root.pp("heatmap");
        let hm_conv = conv2d(&hm.pp("conv"), ConvSpec { cin: d, cout: d, k: 3, stride: 1, bias: true })?;
        let out_init = hm.pp("out");
        let bound = 1.0 / (d as f64).sqrt();
        let hm_out = Conv2d::new(
            out_init.uniform("weight", &[1, d, 1, 1], bound)?,
            Some(out_init.constant("bias", &[1], HEATMAP_PRIOR_BIAS)?),
            Default::default(),
        );
        let psi = [
            linear(&root.pp("psi.0"), d, d)?,
            linear(&root.pp("psi.1"), d, d)?,
            linear(&root.pp("psi.2"), d, d)?,
        ];
        let phi = linear(&root.pp("phi"), 2 * d + 2, d)?;
        let decoder = Decoder::new(&root.pp("decoder"), d, cfg.layers, cfg.n_head, cfg.ffn_dim)?;
        Ok(Detector { cfg, store, backbone, c4_block, fpn, hm_conv, hm_out, psi, phi, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Normalize images of the configured input size into `(B, 3, H, W)`.
    pub fn preprocess(&self, images: &[&Image]) -> Result<Tensor> {
        let (w, h) = self.cfg.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.width != w || img.height != h {
                return Err(ModelError::Shape(format!(
                    "image is {}x{}, model expects {w}x{h}",
                    img.width, img.height
                )));
            }
            for c in 0..3 {
                let (m, s) = (self.cfg.pixel_mean[c], self.cfg.pixel_std[c]);
                data.extend(img.data.iter().skip(c).step_by(3).map(|&v| (v - m) / s));
            }
        }
        let t = Tensor::from_vec(data, (images.len(), 3, h, w), self.device())?;
        Ok(t.to_dtype(self.dtype())?)
    }

    /// Pyramid and `(B, H/4, W/4)` heatmap logits.
    pub fn features(&self, x: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
        let mut f = self.backbone.forward(x)?;
        f.c4 = self.c4_block.forward(&f.c4)?;
        let fp = self.fpn.forward(&f)?;
        let hm = self.hm_out.forward(&self.hm_conv.forward(&fp.p2)?.silu()?)?.squeeze(1)?;
        Ok((fp, hm))
    }

    /// Flattened `(B, N, d)` memory in level order p2, p3, p4.
    pub fn build_memory(&self, fp: &FeaturePyramid) -> Result<Tensor> {
        let mut tokens = Vec::with_capacity(3);
        for (level, psi) in fp.levels().into_iter().zip(&self.psi) {
            let (_, d, h, w) = level.dims4()?;
            let t = level.flatten_from(2)?.transpose(1, 2)?;
            let pe = pe_tensor(h, w, d, level.dtype(), level.device())?.unsqueeze(0)?;
            tokens.push(psi.forward(&t.broadcast_add(&pe)?)?);
        }
        Ok(Tensor::cat(&tokens, 1)?)
    }

    /// Top-K pool-NMS peaks of each heatmap in the batch.
    pub fn peaks(&self, heatmap: &Tensor) -> Result<Vec<Vec<Peak>>> {
        let (_, h, w) = heatmap.dims3()?;
        let values = heatmap.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
        values
            .into_iter()
            .map(|img| {
                let grid = HeatmapGrid::from_values(w, h, img.concat(), HeatmapKind::Logits)?;
                Ok(pool_nms_topk(&grid, self.cfg.k))
            })
            .collect()
    }

    /// Heatmap-seeded query set built from the stride-4 level.
    pub fn queries(&self, fp: &FeaturePyramid, peaks: &[Vec<Peak>]) -> Result<QuerySet> {
        init_queries(&fp.p2, peaks, &self.phi, self.cfg.k)
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_impl(x, None)
    }

    /// Forward with externally fixed peaks, e.g. for gradient checks.
    pub fn forward_with_peaks(&self, x: &Tensor, peaks: &[Vec<Peak>]) -> Result<ForwardOutput> {
        self.forward_impl(x, Some(peaks))
    }

    fn forward_impl(&self, x: &Tensor, peaks: Option<&[Vec<Peak>]>) -> Result<ForwardOutput> {
        let (fp, heatmap) = self.features(x)?;
        let memory = self.build_memory(&fp)?;
        let owned;
        let peaks = match peaks {
            Some(p) => p,
            None => {
                owned = self.peaks(&heatmap)?;
                &owned
            }
        };
        let queries = self.queries(&fp, peaks)?;
        let out = self.decoder.forward(&queries.vectors, &queries.key_bias()?, &memory)?;
        let boxes = decode_boxes(&queries.anchor_tensor()?, &out.deltas, &self.cfg.decode_params())?;
        Ok(ForwardOutput {
            heatmap,
            memory_len: memory.dim(1)?,
            queries,
            logits: out.logits,
            deltas: out.deltas,
            boxes,
        })
    }

    /// Scored boxes of every valid slot, before score filtering and Soft-NMS.
    pub fn detections(&self, out: &ForwardOutput, image_ids: &[u64]) -> Result<Vec<Vec<Detection<BoxN>>>> {
        let logits = out.logits.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let boxes = out.boxes.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
        let mut all = Vec::with_capacity(logits.len());
        for (b, (l, bx)) in logits.iter().zip(&boxes).enumerate() {
            let id = image_ids.get(b).copied().unwrap_or(b as u64);
            let dets = out.queries.valid[b]
                .iter()
                .enumerate()
                .filter(|(_, &v)| v)
                .map(|(i, _)| Detection {
                    bbox: BoxN { cx: bx[i][0], cy: bx[i][1], w: bx[i][2], h: bx[i][3] },
                    score: hgdet_core::heatmap::sigmoid(l[i]),
                    image_id: id,
                })
                .collect();
            all.push(dets);
        }
        Ok(all)
    }

    /// Per-image Hungarian assignment of valid slots to ground truths.
    pub fn match_batch(&self, out: &ForwardOutput, gts: &[Vec<BoxN>], cost: &CostWeights) -> Result<Vec<MatchAssignment>> {
        let dets = self.detections(out, &[])?;
        let logits = out.logits.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        check_batch(dets.len(), gts.len())?;
        let mut res = Vec::with_capacity(gts.len());
        for (b, g) in gts.iter().enumerate() {
            let slots: Vec<usize> = (0..out.queries.k()).filter(|&i| out.queries.valid[b][i]).collect();
            let preds: Vec<QueryPrediction> = slots
                .iter()
                .zip(&dets[b])
                .map(|(&index, d)| QueryPrediction { index, logit: logits[b][index], bbox: d.bbox })
                .collect();
            res.push(hungarian_assign(&build_cost(&preds, g, cost))?);
        }
        Ok(res)
    }

    /// Heatmap targets for a batch of ground truths.
    pub fn targets(&self, gts: &[Vec<BoxN>]) -> Vec<HeatmapGrid> {
        let (w, h) = self.cfg.grid_size();
        gts.iter().map(|g| render_target(g, w, h)).collect()
    }

    /// Batch mean of the per-image composite loss under fixed assignments.
    pub fn loss(
        &self,
        out: &ForwardOutput,
        gts: &[Vec<BoxN>],
        targets: &[HeatmapGrid],
        assignments: &[MatchAssignment],
        cfg: &LossConfig,
    ) -> Result<LossOutput> {
        let b = out.logits.dim(0)?;
        check_batch(b, gts.len())?;
        check_batch(b, targets.len())?;
        check_batch(b, assignments.len())?;
        let w = &cfg.weights;
        let mut total: Option<Tensor> = None;
        let mut parts = [0.0; 4];
        for i in 0..b {
            let hm = heatmap_focal(&out.heatmap.get(i)?, &targets[i].values, &cfg.focal)?;

            let valid: Vec<u32> = (0..out.queries.k())
                .filter(|&s| out.queries.valid[i][s])
                .map(|s| s as u32)
                .collect();
            let cls = if valid.is_empty() {
                out.logits.get(i)?.sum_all()?.zeros_like()?
            } else {
                let positive: Vec<bool> = valid
                    .iter()
                    .map(|&s| assignments[i].pairs.iter().any(|&(q, _)| q == s as usize))
                    .collect();
                let idx = Tensor::from_vec(valid.clone(), valid.len(), self.device())?;
                query_focal(&out.logits.get(i)?.index_select(&idx, 0)?, &positive, &cfg.focal)?
            };

            let zero = cls.zeros_like()?;
            let (l1, iou) = if assignments[i].pairs.is_empty() {
                (zero.clone(), zero)
            } else {
                let (q, g): (Vec<u32>, Vec<usize>) =
                    assignments[i].pairs.iter().map(|&(q, g)| (q as u32, g)).unzip();
                let n = q.len();
                let pred = out.boxes.get(i)?.index_select(&Tensor::from_vec(q, n, self.device())?, 0)?;
                let gt: Vec<f64> = g
                    .iter()
                    .map(|&j| gts[i].get(j).map(|b| b.to_array()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| ModelError::Shape("assignment references a missing ground truth".into()))?
                    .concat();
                let gt = Tensor::from_vec(gt, (n, 4), self.device())?.to_dtype(self.dtype())?;
                (l1_loss(&pred, &gt)?, ciou_loss(&pred, &gt)?)
            };

            let terms = [&hm, &cls, &l1, &iou];
            for (acc, t) in parts.iter_mut().zip(terms) {
                *acc += t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
            let img = ((((hm * w.heatmap)? + (cls * w.cls)?)? + (l1 * w.l1)?)? + (iou * w.iou)?)?;
            total = Some(match total {
                Some(t) => (t + img)?,
                None => img,
            });
        }
        let total = total.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let n = b as f64;
        Ok(LossOutput {
            total: (total / n)?,
            breakdown: LossBreakdown::combine(parts[0] / n, parts[1] / n, parts[2] / n, parts[3] / n, w),
        })
    }

    /// Forward, match and score one batch in a single call.
    pub fn forward_loss(&self, x: &Tensor, gts: &[Vec<BoxN>], cfg: &LossConfig) -> Result<(ForwardOutput, LossOutput)> {
        let out = self.forward(x)?;
        let assignments = self.match_batch(&out, gts, &cfg.cost)?;
        let loss = self.loss(&out, gts, &self.targets(gts), &assignments, cfg)?;
        Ok((out, loss))
    }
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(ModelError::Shape(format!("batch of {a} images vs {b} annotation lists")))
    }
}


//! Differentiable box decoding and training losses.
//!
//! Every function here mirrors the `f64` reference in `hgdet_core` so the
//! two can be cross-checked value for value.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use hgdet_core::geometry::{DecodeParams, MIN_EXTENT};
use hgdet_core::heatmap::FocalParams;

use crate::error::{ModelError, Result};
use crate::ops::{atan, softplus};

/// Offsets never move a box further than the clipped extremes, so clamping
/// the log-size keeps `exp` finite without changing any decoded box.
const MAX_LOG_SIZE: f64 = 30.0;

fn col(t: &Tensor, i: usize) -> Result<Tensor> {
    Ok(t.narrow(D::Minus1, i, 1)?)
}

/// Decode `(..., 4)` deltas around `(..., 2)` anchors into clipped
/// `(cx, cy, w, h)` boxes with sides floored at [`MIN_EXTENT`].
pub fn decode_boxes(anchors: &Tensor, deltas: &Tensor, p: &DecodeParams) -> Result<Tensor> {
    let axis = |a: usize, d: usize, size0: f64| -> Result<(Tensor, Tensor)> {
        let c = (col(anchors, a)? + (col(deltas, d)?.tanh()? * p.s_delta)?)?;
        let s = (col(deltas, d + 2)?.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE)?.exp()? * size0)?;
        let half = (&s * 0.5)?;
        let lo = (&c - &half)?.clamp(0.0, 1.0)?;
        let hi = (&c + &half)?.clamp(0.0, 1.0)?;
        let center = ((&lo + &hi)? * 0.5)?;
        let size = (hi - lo)?.maximum(MIN_EXTENT)?;
        Ok((center, size))
    };
    let (cx, w) = axis(0, 0, p.w0)?;
    let (cy, h) = axis(1, 1, p.h0)?;
    Ok(Tensor::cat(&[&cx, &cy, &w, &h], D::Minus1)?)
}

fn focal_terms(
    logits: &Tensor,
    pos_weight: &Tensor,
    neg_weight: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    let log_p = softplus(&logits.neg()?)?.neg()?;
    let log_1mp = softplus(logits)?.neg()?;
    let pos = ((&log_1mp * gamma)?.exp()? * log_p.neg()?)?;
    let neg = ((&log_p * gamma)?.exp()? * log_1mp.neg()?)?;
    Ok(((pos * pos_weight)? + (neg * neg_weight)?)?.sum_all()?)
}

fn weights_tensor(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, n, like.device())?.to_dtype(like.dtype())?)
}

/// Penalty-reduced focal loss over a flattened heatmap. Cells whose target
/// is exactly 1 are positives; the sum is divided by `max(1, #positives)`.
pub fn heatmap_focal(logits: &Tensor, target: &[f64], p: &FocalParams) -> Result<Tensor> {
    let logits = logits.flatten_all()?;
    if logits.elem_count() != target.len() {
        return Err(ModelError::Shape(format!(
            "{} heatmap logits vs {} targets",
            logits.elem_count(),
            target.len()
        )));
    }
    let n_pos = target.iter().filter(|&&t| t >= 1.0).count();
    let pos_w = target.iter().map(|&t| if t >= 1.0 { p.alpha_pos } else { 0.0 }).collect();
    let neg_w = target
        .iter()
        .map(|&t| if t >= 1.0 { 0.0 } else { p.alpha_neg * (1.0 - t).powf(p.beta) })
        .collect();
    let sum = focal_terms(&logits, &weights_tensor(pos_w, &logits)?, &weights_tensor(neg_w, &logits)?, p.gamma)?;
    Ok((sum / n_pos.max(1) as f64)?)
}

/// Sigmoid focal classification, normalized by the number of queries.
pub fn query_focal(logits: &Tensor, positive: &[bool], p: &FocalParams) -> Result<Tensor> {
    let logits = logits.flatten_all()?;
    if logits.elem_count() != positive.len() {
        return Err(ModelError::Shape(format!(
            "{} query logits vs {} labels",
            logits.elem_count(),
            positive.len()
        )));
    }
    let pos_w = positive.iter().map(|&y| if y { p.alpha_pos } else { 0.0 }).collect();
    let neg_w = positive.iter().map(|&y| if y { 0.0 } else { p.alpha_neg }).collect();
    let sum = focal_terms(&logits, &weights_tensor(pos_w, &logits)?, &weights_tensor(neg_w, &logits)?, p.gamma)?;
    Ok((sum / positive.len().max(1) as f64)?)
}

/// Mean over rows of `||a - b||_1` for `(M, 4)` boxes.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let m = pred.dim(0)?;
    Ok(((pred - gt)?.abs()?.sum_all()? / m.max(1) as f64)?)
}

fn corners(b: &Tensor) -> Result<[Tensor; 4]> {
    let (cx, cy, w, h) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let hw = (&w * 0.5)?;
    let hh = (&h * 0.5)?;
    Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
}

/// Row-wise CIoU of `(M, 4)` `(cx, cy, w, h)` boxes with positive sides.
/// The trade-off weight `alpha` is differentiated like every other term.
pub fn ciou(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = (col(a, 2)? * col(a, 3)?)?;
    let area_b = (col(b, 2)? * col(b, 3)?)?;
    let iou = (&inter / ((area_a + area_b)? - &inter)?)?;

    let ew = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let eh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let c2 = (ew.sqr()? + eh.sqr()?)?;
    let rho2 = ((col(a, 0)? - col(b, 0)?)?.sqr()? + (col(a, 1)? - col(b, 1)?)?.sqr()?)?;

    let ra = atan(&(col(a, 2)? / col(a, 3)?)?)?;
    let rb = atan(&(col(b, 2)? / col(b, 3)?)?)?;
    let v = ((ra - rb)?.sqr()? * (4.0 / (PI * PI)))?;
    // tiny offset keeps v = 0, IoU = 1 at 0 / eps instead of 0 / 0
    let alpha_v = (v.sqr()? / ((iou.affine(-1.0, 1.0)? + &v)? + 1e-16)?)?;
    Ok(((iou - (rho2 / c2)?)? - alpha_v)?.squeeze(D::Minus1)?)
}

/// Mean over rows of `1 - CIoU`.
pub fn ciou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let m = pred.dim(0)?;
    Ok((ciou(pred, gt)?.affine(-1.0, 1.0)?.sum_all()? / m.max(1) as f64)?)
}

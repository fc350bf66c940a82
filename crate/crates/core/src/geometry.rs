//! Axis-aligned box arithmetic.
//!
//! Two box representations are used throughout: [`BoxN`], a normalized
//! `(cx, cy, w, h)` tuple in image-relative units, and [`BoxPx`], pixel
//! corners used for evaluation I/O. Overlap measures are written against the
//! [`Corners`] trait so they work on either.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest extent a decoded box may collapse to after clipping.
pub const MIN_EXTENT: f64 = 1e-6;

/// Anything that can report its `(x0, y0, x1, y1)` corners.
pub trait Corners {
    fn corners(&self) -> [f64; 4];

    fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.corners();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.corners();
        (0.5 * (x0 + x1), 0.5 * (y0 + y1))
    }
}

/// Normalized `(cx, cy, w, h)` box; the geometry currency of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    /// Checked constructor enforcing finiteness, positive size and an
    /// in-image center.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoxN { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{b:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoxN {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_px(self, width: f64, height: f64) -> BoxPx {
        let [x0, y0, x1, y1] = self.corners();
        BoxPx {
            x0: x0 * width,
            y0: y0 * height,
            x1: x1 * width,
            y1: y1 * height,
        }
    }

    /// Clip to the unit square and re-derive center and size. Boxes that
    /// clip to nothing keep a [`MIN_EXTENT`] sliver at the clamped center.
    pub fn clipped(self) -> BoxN {
        let [x0, y0, x1, y1] = self.corners();
        let (cx, w) = clip_axis(x0, x1, self.cx);
        let (cy, h) = clip_axis(y0, y1, self.cy);
        BoxN { cx, cy, w, h }
    }
}

fn clip_axis(lo: f64, hi: f64, center: f64) -> (f64, f64) {
    let lo_c = lo.clamp(0.0, 1.0);
    let hi_c = hi.clamp(0.0, 1.0);
    if hi_c - lo_c >= MIN_EXTENT {
        return (0.5 * (lo_c + hi_c), hi_c - lo_c);
    }
    let c = if center.is_finite() {
        center.clamp(0.5 * MIN_EXTENT, 1.0 - 0.5 * MIN_EXTENT)
    } else {
        0.5
    };
    (c, MIN_EXTENT)
}

impl Corners for BoxN {
    fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }
}

/// Pixel-space box given by its corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPx {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxPx {
    /// COCO `[x, y, w, h]` form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxPx {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1 - self.x0, self.y1 - self.y0]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn clamped(self, width: f64, height: f64) -> BoxPx {
        BoxPx {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    pub fn to_norm(self, width: f64, height: f64) -> BoxN {
        BoxN::from_corners(
            self.x0 / width,
            self.y0 / height,
            self.x1 / width,
            self.y1 / height,
        )
    }

    /// Closed containment test (boundary counts as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

impl Corners for BoxPx {
    fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// A scored box belonging to one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<B = BoxPx> {
    pub bbox: B,
    pub score: f64,
    pub image_id: u64,
}

/// Anchor-relative offsets `(dx, dy, dlogw, dlogh)` predicted by the box head.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dlogw: f64,
    pub dlogh: f64,
}

/// Parameters of the anchor-relative box parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Maximum center displacement from the anchor.
    pub s_delta: f64,
    pub w0: f64,
    pub h0: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            s_delta: 0.3,
            w0: 0.08,
            h0: 0.08,
        }
    }
}

pub fn intersection<A: Corners, B: Corners>(a: &A, b: &B) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Intersection over union. Zero-area boxes contribute no overlap.
pub fn iou<A: Corners, B: Corners>(a: &A, b: &B) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Complete IoU: `IoU - rho^2/c^2 - alpha*v`.
///
/// `rho` is the center distance, `c` the diagonal of the smallest enclosing
/// box, `v` the aspect-ratio discrepancy and `alpha = v / ((1 - IoU) + v)`.
pub fn ciou<A: Corners, B: Corners>(a: &A, b: &B) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iou = iou(a, b);

    let ew = ax1.max(bx1) - ax0.min(bx0);
    let eh = ay1.max(by1) - ay0.min(by0);
    let c2 = ew * ew + eh * eh;
    if c2 <= 0.0 {
        // both boxes collapse onto the same point
        return 1.0;
    }
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let rho2 = (acx - bcx).powi(2) + (acy - bcy).powi(2);

    let v = aspect_term(ax1 - ax0, ay1 - ay0, bx1 - bx0, by1 - by0);
    let alpha_v = if v > 0.0 { v * v / ((1.0 - iou) + v) } else { 0.0 };
    iou - rho2 / c2 - alpha_v
}

/// `v = 4/pi^2 * (atan(wa/ha) - atan(wb/hb))^2`.
pub fn aspect_term(wa: f64, ha: f64, wb: f64, hb: f64) -> f64 {
    let d = wa.atan2(ha) - wb.atan2(hb);
    4.0 / (PI * PI) * d * d
}

/// Euclidean distance between box centers.
pub fn center_distance<A: Corners, B: Corners>(a: &A, b: &B) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// `||a - b||_1` over the `(cx, cy, w, h)` components.
pub fn l1_distance(a: &BoxN, b: &BoxN) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Unclipped anchor-relative decode.
pub fn decode_raw(anchor: (f64, f64), delta: &BoxDelta, p: &DecodeParams) -> BoxN {
    BoxN {
        cx: anchor.0 + p.s_delta * delta.dx.tanh(),
        cy: anchor.1 + p.s_delta * delta.dy.tanh(),
        w: p.w0 * delta.dlogw.exp(),
        h: p.h0 * delta.dlogh.exp(),
    }
}

/// Decode offsets relative to a normalized anchor and clip into the image.
pub fn decode_box(anchor: (f64, f64), delta: &BoxDelta, p: &DecodeParams) -> BoxN {
    decode_raw(anchor, delta, p).clipped()
}

/// Inverse of [`decode_raw`]. Center offsets beyond `s_delta` saturate.
pub fn encode_box(anchor: (f64, f64), b: &BoxN, p: &DecodeParams) -> BoxDelta {
    let lim = 1.0 - 1e-12;
    let t = |off: f64| (off / p.s_delta).clamp(-lim, lim).atanh();
    BoxDelta {
        dx: t(b.cx - anchor.0),
        dy: t(b.cy - anchor.1),
        dlogw: (b.w / p.w0).ln(),
        dlogh: (b.h / p.h0).ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsParams {
    /// Gaussian decay width: `s <- s * exp(-iou^2 / sigma)`.
    pub sigma: f64,
    /// Decay applies only to candidates overlapping a kept box at least this much.
    pub iou_threshold: f64,
    /// Candidates whose score falls below this are discarded.
    pub score_floor: f64,
}

impl Default for SoftNmsParams {
    fn default() -> Self {
        SoftNmsParams {
            sigma: 0.5,
            iou_threshold: 0.5,
            score_floor: 0.05,
        }
    }
}

/// Gaussian Soft-NMS with a decay threshold.
///
/// Repeatedly keeps the highest-scoring remaining detection and decays every
/// remaining candidate whose IoU with it is at least `iou_threshold`.
/// The output is sorted by descending score.
pub fn soft_nms<B: Corners + Copy>(
    dets: &[Detection<B>],
    params: &SoftNmsParams,
) -> Vec<Detection<B>> {
    assert!(params.sigma > 0.0, "soft-nms sigma must be positive");
    let mut pool: Vec<Detection<B>> = dets
        .iter()
        .filter(|d| d.score >= params.score_floor)
        .copied()
        .collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.score.total_cmp(&b.score))
            .map(|(i, _)| i)
            .expect("pool is non-empty");
        let top = pool.swap_remove(best);
        for d in pool.iter_mut() {
            let ov = iou(&top.bbox, &d.bbox);
            if ov >= params.iou_threshold {
                d.score *= (-(ov * ov) / params.sigma).exp();
            }
        }
        pool.retain(|d| d.score >= params.score_floor);
        kept.push(top);
    }
    kept
}

/// Inference post-processing: drop low scores, Soft-NMS, cap the count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessParams {
    pub score_threshold: f64,
    pub nms: SoftNmsParams,
    pub max_detections: usize,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            score_threshold: 0.05,
            nms: SoftNmsParams::default(),
            max_detections: 100,
        }
    }
}

pub fn postprocess<B: Corners + Copy>(
    dets: &[Detection<B>],
    params: &PostprocessParams,
) -> Vec<Detection<B>> {
    let candidates: Vec<_> = dets
        .iter()
        .filter(|d| d.score >= params.score_threshold)
        .copied()
        .collect();
    let mut out = soft_nms(&candidates, &params.nms);
    out.truncate(params.max_detections);
    out
}

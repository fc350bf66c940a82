//! Gaussian center heatmaps on the stride-4 grid, 3x3 pool-NMS peak
//! extraction and the penalty-reduced focal loss for soft targets.
//!
//! Grid cell `(u, v)` covers normalized center `((u + 0.5) / W, (v + 0.5) / H)`,
//! so a normalized coordinate `c` maps to grid coordinate `c * W - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    /// Values in `[0, 1]`.
    Target,
    /// Unbounded pre-sigmoid scores.
    Logits,
}

/// Single-channel score field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kind: HeatmapKind,
}

impl HeatmapGrid {
    pub fn zeros(width: usize, height: usize, kind: HeatmapKind) -> Self {
        HeatmapGrid {
            width,
            height,
            values: vec![0.0; width * height],
            kind,
        }
    }

    pub fn from_values(
        width: usize,
        height: usize,
        values: Vec<f64>,
        kind: HeatmapKind,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(HeatmapGrid {
            width,
            height,
            values,
            kind,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.values[v * self.width + u] = value;
    }
}

/// A surviving local maximum at integer grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub u: usize,
    pub v: usize,
    /// `sigmoid(logit)` at the cell.
    pub score: f64,
}

impl Peak {
    /// Cell-center normalized coordinates.
    pub fn normalized(&self, grid_w: usize, grid_h: usize) -> (f64, f64) {
        (
            (self.u as f64 + 0.5) / grid_w as f64,
            (self.v as f64 + 0.5) / grid_h as f64,
        )
    }
}

/// Gaussian radius in grid cells: a sixth of the shorter box side, floored at one cell.
pub fn gaussian_sigma(b: &BoxN, grid_w: usize, grid_h: usize) -> f64 {
    let side = (b.w * grid_w as f64).min(b.h * grid_h as f64);
    (side / 6.0).max(1.0)
}

/// Grid coordinates of a box center (continuous, cell centers at integers).
pub fn center_on_grid(b: &BoxN, grid_w: usize, grid_h: usize) -> (f64, f64) {
    (b.cx * grid_w as f64 - 0.5, b.cy * grid_h as f64 - 0.5)
}

/// Nearest cell to a box center, clamped into the grid.
pub fn center_cell(b: &BoxN, grid_w: usize, grid_h: usize) -> (usize, usize) {
    let (mx, my) = center_on_grid(b, grid_w, grid_h);
    let u = mx.round().clamp(0.0, (grid_w - 1) as f64) as usize;
    let v = my.round().clamp(0.0, (grid_h - 1) as f64) as usize;
    (u, v)
}

/// Render the max-over-objects Gaussian target. Each object's nearest
/// center cell is pinned to exactly 1.
pub fn render_target(gts: &[BoxN], grid_w: usize, grid_h: usize) -> HeatmapGrid {
    let mut grid = HeatmapGrid::zeros(grid_w, grid_h, HeatmapKind::Target);
    for g in gts {
        let (mx, my) = center_on_grid(g, grid_w, grid_h);
        let sigma = gaussian_sigma(g, grid_w, grid_h);
        let denom = 2.0 * sigma * sigma;
        for v in 0..grid_h {
            let dy = v as f64 - my;
            for u in 0..grid_w {
                let dx = u as f64 - mx;
                let val = (-(dx * dx + dy * dy) / denom).exp();
                let idx = v * grid_w + u;
                if val > grid.values[idx] {
                    grid.values[idx] = val;
                }
            }
        }
    }
    for g in gts {
        let (u, v) = center_cell(g, grid_w, grid_h);
        grid.set(u, v, 1.0);
    }
    grid
}

/// 3x3 local-maximum filter followed by Top-K.
///
/// A cell survives when no in-bounds neighbor is strictly larger, so plateau
/// cells all survive. Survivors are ranked by value (descending), then
/// row-major position.
pub fn pool_nms_topk(logits: &HeatmapGrid, k: usize) -> Vec<Peak> {
    let (w, h) = (logits.width, logits.height);
    let mut survivors: Vec<(f64, usize, usize)> = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let x = logits.get(u, v);
            let mut is_max = true;
            'nb: for nv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                for nu in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                    if logits.get(nu, nv) > x {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                survivors.push((x, v, u));
            }
        }
    }
    survivors.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    survivors
        .into_iter()
        .take(k)
        .map(|(x, v, u)| Peak {
            u,
            v,
            score: sigmoid(x),
        })
        .collect()
}

/// Focal loss parameters shared by the heatmap and the query classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    /// Weight on positive cells / matched queries.
    pub alpha_pos: f64,
    /// Weight on negative cells / unmatched queries.
    pub alpha_neg: f64,
    pub gamma: f64,
    /// Exponent of the `(1 - target)` penalty reduction on soft negatives.
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha_pos: 0.25,
            alpha_neg: 0.75,
            gamma: 1.5,
            beta: 4.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Penalty-reduced focal loss for Gaussian targets.
///
/// Cells with target exactly 1 are positives
/// `alpha_pos * (1-p)^gamma * -ln p`; all others are negatives
/// `alpha_neg * (1-t)^beta * p^gamma * -ln(1-p)`. The sum is divided by
/// `max(1, #positives)`.
pub fn heatmap_focal_loss(
    logits: &HeatmapGrid,
    target: &HeatmapGrid,
    params: &FocalParams,
) -> Result<f64> {
    if logits.width != target.width || logits.height != target.height {
        return Err(Error::Shape(format!(
            "logits {}x{} vs target {}x{}",
            logits.width, logits.height, target.width, target.height
        )));
    }
    let mut total = 0.0;
    let mut n_pos = 0usize;
    for (&x, &t) in logits.values.iter().zip(&target.values) {
        let log_p = -softplus(-x);
        let log_1mp = -softplus(x);
        if t >= 1.0 {
            n_pos += 1;
            total += params.alpha_pos * (params.gamma * log_1mp).exp() * -log_p;
        } else {
            let reduce = (1.0 - t).powf(params.beta);
            total += params.alpha_neg * reduce * (params.gamma * log_p).exp() * -log_1mp;
        }
    }
    Ok(total / n_pos.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigma_examples() {
        let b = BoxN::new(0.5, 0.5, 0.08, 0.08).unwrap();
        assert_abs_diff_eq!(gaussian_sigma(&b, 128, 128), 10.24 / 6.0, epsilon = 1e-12);
        let tiny = BoxN::new(0.5, 0.5, 0.01, 0.01).unwrap();
        assert_eq!(gaussian_sigma(&tiny, 128, 128), 1.0);
    }

    #[test]
    fn sigma_monotone_in_short_side() {
        let mut last = 0.0;
        for i in 1..=100 {
            let s = i as f64 / 100.0;
            let b = BoxN::new(0.5, 0.5, s, 0.5).unwrap();
            let sig = gaussian_sigma(&b, 64, 64);
            assert!(sig >= last);
            last = sig;
        }
    }

    #[test]
    fn empty_target_is_zero() {
        let g = render_target(&[], 8, 6);
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.values.len(), 48);
    }

    #[test]
    fn center_and_sigma_ring() {
        // short side 12 cells -> sigma 2; center exactly on cell (64, 40)
        let b = BoxN::new(64.5 / 128.0, 40.5 / 128.0, 12.0 / 128.0, 0.2).unwrap();
        let g = render_target(&[b], 128, 128);
        assert_eq!(g.get(64, 40), 1.0);
        assert_abs_diff_eq!(g.get(66, 40), (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(64, 38), (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn overlap_takes_max() {
        let a = BoxN::new(10.5 / 32.0, 10.5 / 32.0, 0.3, 0.3).unwrap();
        let b = BoxN::new(14.5 / 32.0, 10.5 / 32.0, 0.2, 0.2).unwrap();
        let g = render_target(&[a, b], 32, 32);
        let ga = render_target(&[a], 32, 32);
        let gb = render_target(&[b], 32, 32);
        for i in 0..g.values.len() {
            assert_eq!(g.values[i], ga.values[i].max(gb.values[i]));
        }
    }

    #[test]
    fn single_global_max_is_first_peak() {
        let mut g = HeatmapGrid::zeros(5, 4, HeatmapKind::Logits);
        g.set(3, 2, 4.0);
        let peaks = pool_nms_topk(&g, 3);
        assert_eq!((peaks[0].u, peaks[0].v), (3, 2));
        assert_abs_diff_eq!(peaks[0].score, sigmoid(4.0));
    }

    #[test]
    fn constant_grid_keeps_all_row_major() {
        let g = HeatmapGrid::from_values(3, 3, vec![0.5; 9], HeatmapKind::Logits).unwrap();
        let peaks = pool_nms_topk(&g, 4);
        let cells: Vec<_> = peaks.iter().map(|p| (p.u, p.v)).collect();
        assert_eq!(cells, vec![(0, 0), (1, 0), (2, 0), (0, 1)]);
        assert_eq!(pool_nms_topk(&g, 100).len(), 9);
    }

    #[test]
    fn focal_single_positive() {
        let logits = HeatmapGrid::from_values(1, 1, vec![0.0], HeatmapKind::Logits).unwrap();
        let target = HeatmapGrid::from_values(1, 1, vec![1.0], HeatmapKind::Target).unwrap();
        let l = heatmap_focal_loss(&logits, &target, &FocalParams::default()).unwrap();
        assert_abs_diff_eq!(l, 0.25 * 0.5f64.powf(1.5) * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.06127, epsilon = 1e-5);
    }

    #[test]
    fn focal_vanishes_at_saturation() {
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let x: Vec<f64> = t.iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect();
        let logits = HeatmapGrid::from_values(2, 2, x, HeatmapKind::Logits).unwrap();
        let target = HeatmapGrid::from_values(2, 2, t, HeatmapKind::Target).unwrap();
        let l = heatmap_focal_loss(&logits, &target, &FocalParams::default()).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn focal_rejects_shape_mismatch() {
        let a = HeatmapGrid::zeros(2, 2, HeatmapKind::Logits);
        let b = HeatmapGrid::zeros(2, 3, HeatmapKind::Target);
        assert!(heatmap_focal_loss(&a, &b, &FocalParams::default()).is_err());
    }
}

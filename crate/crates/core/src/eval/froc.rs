//! Free-response ROC with a center-in-box hit rule.

use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::geometry::Corners;

/// The 19 confidence thresholds `0.95, 0.90, ..., 0.05`.
pub fn froc_thresholds() -> Vec<f64> {
    (0..19).map(|i| (95 - 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fppi: f64,
    /// `None` when there is no ground truth at all.
    pub sensitivity: Option<f64>,
    pub hits: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// Ordered from the strictest threshold to the most lenient.
    pub points: Vec<FrocPoint>,
    pub n_images: usize,
    pub n_gt: usize,
}

/// Greedy one-to-one center-in-box matching of one image at one threshold.
/// Returns `(hits, kept)`.
pub(crate) fn match_image(rec: &ImageRecord, threshold: f64) -> (usize, usize) {
    let mut order: Vec<usize> = (0..rec.dets.len())
        .filter(|&i| rec.dets[i].score >= threshold)
        .collect();
    order.sort_by(|&a, &b| rec.dets[b].score.total_cmp(&rec.dets[a].score));
    let mut taken = vec![false; rec.gts.len()];
    let mut hits = 0;
    for &d in &order {
        let (cx, cy) = rec.dets[d].bbox.center();
        // smallest containing GT wins; earliest index breaks area ties
        let hit = rec
            .gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !taken[*g] && gt.bbox.contains(cx, cy))
            .min_by(|a, b| a.1.bbox.area().total_cmp(&b.1.bbox.area()))
            .map(|(g, _)| g);
        if let Some(g) = hit {
            taken[g] = true;
            hits += 1;
        }
    }
    debug_assert!(hits <= rec.gts.len());
    (hits, order.len())
}

pub fn froc_curve(images: &[ImageRecord]) -> Result<FrocCurve> {
    froc_curve_refs(&images.iter().collect::<Vec<_>>())
}

pub(crate) fn froc_curve_refs(images: &[&ImageRecord]) -> Result<FrocCurve> {
    if images.is_empty() {
        return Err(Error::Empty("FROC needs at least one image"));
    }
    let n_gt: usize = images.iter().map(|r| r.gts.len()).sum();
    let n_images = images.len();
    let points = froc_thresholds()
        .into_iter()
        .map(|t| {
            let (hits, kept) = images
                .iter()
                .map(|r| match_image(r, t))
                .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            FrocPoint {
                threshold: t,
                fppi: (kept - hits) as f64 / n_images as f64,
                sensitivity: (n_gt > 0).then(|| hits as f64 / n_gt as f64),
                hits,
                kept,
            }
        })
        .collect();
    Ok(FrocCurve {
        points,
        n_images,
        n_gt,
    })
}

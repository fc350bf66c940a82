//! Detection metrics: COCO-style AP over a lenient IoU sweep, FROC with a
//! center-in-box hit rule, and image-level bootstrap bands for FROC.

mod ap;
mod bootstrap;
mod froc;

pub use ap::{ap_sweep, AreaRange, ApParams, ApReport};
pub use bootstrap::{bootstrap_froc, BootstrapBand};
pub use froc::{froc_curve, froc_thresholds, FrocCurve, FrocPoint};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxPx, Detection};

/// A ground-truth box with the area used for size partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BoxPx,
    pub area: f64,
}

impl GtBox {
    pub fn new(bbox: BoxPx) -> Self {
        GtBox {
            area: bbox.width() * bbox.height(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoxPx,
    pub score: f64,
}

/// Ground truth and detections of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub gts: Vec<GtBox>,
    /// In the order they were supplied; the metrics sort stably by score.
    pub dets: Vec<ScoredBox>,
}

/// Join per-image ground truth with a flat detection list.
///
/// Every ground-truth image appears in the output (sorted by id), with or
/// without detections. Detections naming an unknown image are an error.
pub fn join(gt: &BTreeMap<u64, Vec<GtBox>>, dets: &[Detection]) -> Result<Vec<ImageRecord>> {
    let mut records: BTreeMap<u64, ImageRecord> = gt
        .iter()
        .map(|(&id, g)| {
            (
                id,
                ImageRecord {
                    image_id: id,
                    gts: g.clone(),
                    dets: Vec::new(),
                },
            )
        })
        .collect();
    let mut orphans = Vec::new();
    for d in dets {
        match records.get_mut(&d.image_id) {
            Some(r) => r.dets.push(ScoredBox {
                bbox: d.bbox,
                score: d.score,
            }),
            None => orphans.push(d.image_id),
        }
    }
    if !orphans.is_empty() {
        orphans.sort_unstable();
        orphans.dedup();
        return Err(Error::IdMismatch(orphans));
    }
    Ok(records.into_values().collect())
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of sorted data.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_reports_orphans() {
        let mut gt = BTreeMap::new();
        gt.insert(1, vec![GtBox::new(BoxPx::from_xywh(0.0, 0.0, 4.0, 4.0))]);
        let d = |id| Detection {
            bbox: BoxPx::from_xywh(0.0, 0.0, 1.0, 1.0),
            score: 0.5,
            image_id: id,
        };
        assert!(join(&gt, &[d(1)]).is_ok());
        match join(&gt, &[d(1), d(9), d(7), d(9)]) {
            Err(Error::IdMismatch(ids)) => assert_eq!(ids, vec![7, 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&xs, 50.0), 3.0);
        assert_eq!(percentile_sorted(&xs, 12.5), 1.5);
        assert_eq!(percentile_sorted(&[7.0], 97.5), 7.0);
    }
}

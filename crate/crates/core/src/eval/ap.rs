//! Single-category COCO bbox AP following `pycocotools` evaluate/accumulate
//! semantics (ignore flags, stable score ordering, 101-point interpolation).

use serde::{Deserialize, Serialize};

use super::ImageRecord;
use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { lo: 0.0, hi: 1e10 };
    pub const SMALL: AreaRange = AreaRange { lo: 0.0, hi: 32.0 * 32.0 };
    pub const MEDIUM: AreaRange = AreaRange {
        lo: 32.0 * 32.0,
        hi: 96.0 * 96.0,
    };

    fn excludes(&self, area: f64) -> bool {
        area < self.lo || area > self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApParams {
    pub iou_lo: f64,
    pub iou_hi: f64,
    pub iou_step: f64,
    pub max_dets: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            iou_lo: 0.05,
            iou_hi: 0.50,
            iou_step: 0.05,
            max_dets: 100,
        }
    }
}

impl ApParams {
    /// `numpy.linspace(lo, hi, n)` values, bit for bit.
    pub fn thresholds(&self) -> Vec<f64> {
        let n = ((self.iou_hi - self.iou_lo) / self.iou_step).round() as usize + 1;
        linspace(self.iou_lo, self.iou_hi, n)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step + lo).collect();
    v[n - 1] = hi;
    v
}

/// AP summary. `None` marks an undefined value (no ground truth in range).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_thresholds: Vec<f64>,
    /// AP averaged over all IoU thresholds, all sizes.
    pub ap_mean: Option<f64>,
    pub ap_at_050: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    /// AP per IoU threshold, all sizes.
    pub ap_per_threshold: Vec<Option<f64>>,
    /// Recall at `max_dets` averaged over thresholds.
    pub ar_mean: Option<f64>,
}

struct Accumulated {
    /// `[threshold][recall point]`, `None` when the range has no ground truth.
    precision: Option<Vec<Vec<f64>>>,
    recall: Option<Vec<f64>>,
}

pub fn ap_sweep(images: &[ImageRecord], params: &ApParams) -> ApReport {
    let thr = params.thresholds();
    let all = accumulate(images, &thr, AreaRange::ALL, params.max_dets);
    let small = accumulate(images, &thr, AreaRange::SMALL, params.max_dets);
    let medium = accumulate(images, &thr, AreaRange::MEDIUM, params.max_dets);

    let mean_of = |acc: &Accumulated, t: Option<usize>| -> Option<f64> {
        let p = acc.precision.as_ref()?;
        let rows: Vec<&Vec<f64>> = match t {
            Some(t) => vec![&p[t]],
            None => p.iter().collect(),
        };
        let n: usize = rows.iter().map(|r| r.len()).sum();
        let s: f64 = rows.iter().flat_map(|r| r.iter()).sum();
        Some(s / n as f64)
    };

    let at_050 = thr.iter().position(|&t| t == 0.5);
    ApReport {
        ap_mean: mean_of(&all, None),
        ap_at_050: at_050.and_then(|t| mean_of(&all, Some(t))),
        ap_small: mean_of(&small, None),
        ap_medium: mean_of(&medium, None),
        ap_per_threshold: (0..thr.len()).map(|t| mean_of(&all, Some(t))).collect(),
        ar_mean: all
            .recall
            .as_ref()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64),
        iou_thresholds: thr,
    }
}

/// Per-image matching outcome for one area range.
struct ImageMatch {
    scores: Vec<f64>,
    /// `[threshold][det]` matched flag.
    matched: Vec<Vec<bool>>,
    /// `[threshold][det]` ignore flag.
    ignored: Vec<Vec<bool>>,
    n_gt_valid: usize,
}

fn evaluate_image(rec: &ImageRecord, thr: &[f64], range: AreaRange, max_dets: usize) -> ImageMatch {
    // ground truths: non-ignored first, stable
    let mut gt_order: Vec<usize> = (0..rec.gts.len()).collect();
    let gt_ignore_raw: Vec<bool> = rec.gts.iter().map(|g| range.excludes(g.area)).collect();
    gt_order.sort_by_key(|&i| gt_ignore_raw[i]);
    let gt_ignore: Vec<bool> = gt_order.iter().map(|&i| gt_ignore_raw[i]).collect();

    let mut det_order: Vec<usize> = (0..rec.dets.len()).collect();
    det_order.sort_by(|&a, &b| rec.dets[b].score.total_cmp(&rec.dets[a].score));
    det_order.truncate(max_dets);

    let ious: Vec<Vec<f64>> = det_order
        .iter()
        .map(|&d| {
            gt_order
                .iter()
                .map(|&g| iou(&rec.dets[d].bbox, &rec.gts[g].bbox))
                .collect()
        })
        .collect();

    let nd = det_order.len();
    let ng = gt_order.len();
    let mut matched = vec![vec![false; nd]; thr.len()];
    let mut ignored = vec![vec![false; nd]; thr.len()];
    for (ti, &t) in thr.iter().enumerate() {
        let mut gt_taken = vec![false; ng];
        for di in 0..nd {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..ng {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !gt_ignore[mi] && gt_ignore[gi] {
                        break;
                    }
                }
                if ious[di][gi] < best {
                    continue;
                }
                best = ious[di][gi];
                m = Some(gi);
            }
            if let Some(gi) = m {
                ignored[ti][di] = gt_ignore[gi];
                matched[ti][di] = true;
                gt_taken[gi] = true;
            }
        }
        for di in 0..nd {
            let b = rec.dets[det_order[di]].bbox;
            let area = b.width() * b.height();
            if !matched[ti][di] && range.excludes(area) {
                ignored[ti][di] = true;
            }
        }
    }
    ImageMatch {
        scores: det_order.iter().map(|&d| rec.dets[d].score).collect(),
        matched,
        ignored,
        n_gt_valid: gt_ignore.iter().filter(|&&ig| !ig).count(),
    }
}

fn accumulate(images: &[ImageRecord], thr: &[f64], range: AreaRange, max_dets: usize) -> Accumulated {
    let mut sorted: Vec<&ImageRecord> = images.iter().collect();
    sorted.sort_by_key(|r| r.image_id);
    let per_image: Vec<ImageMatch> = sorted
        .iter()
        .map(|r| evaluate_image(r, thr, range, max_dets))
        .collect();

    let npig: usize = per_image.iter().map(|m| m.n_gt_valid).sum();
    if npig == 0 {
        return Accumulated {
            precision: None,
            recall: None,
        };
    }

    // concatenated detections in image order, then a stable sort by score
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (ii, m) in per_image.iter().enumerate() {
        for (di, &s) in m.scores.iter().enumerate() {
            flat.push((s, ii, di));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0));

    let rec_thrs = linspace(0.0, 1.0, 101);
    let eps = f64::EPSILON;
    let mut precision = Vec::with_capacity(thr.len());
    let mut recall = Vec::with_capacity(thr.len());
    for ti in 0..thr.len() {
        let mut tp = 0.0f64;
        let mut fp = 0.0f64;
        let mut rc = Vec::with_capacity(flat.len());
        let mut pr = Vec::with_capacity(flat.len());
        for &(_, ii, di) in &flat {
            let m = &per_image[ii];
            if m.ignored[ti][di] {
                // ignored detections still occupy a slot with repeated counts
            } else if m.matched[ti][di] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / npig as f64);
            pr.push(tp / (fp + tp + eps));
        }
        recall.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let q: Vec<f64> = rec_thrs
            .iter()
            .map(|&r| {
                let idx = rc.partition_point(|&x| x < r);
                pr.get(idx).copied().unwrap_or(0.0)
            })
            .collect();
        precision.push(q);
    }
    Accumulated {
        precision: Some(precision),
        recall: Some(recall),
    }
}

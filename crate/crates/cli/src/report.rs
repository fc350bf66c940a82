//! Metric reports joining predictions with ground truth.

use hgdet_core::data::{gt_by_image, CocoDataset};
use hgdet_core::eval::{ap_sweep, bootstrap_froc, froc_curve, join, ApParams, ApReport, BootstrapBand, FrocCurve, ImageRecord};
use hgdet_core::Detection;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    pub ap: ApReport,
    pub froc: FrocCurve,
}

pub fn records(gt: &CocoDataset, dets: &[Detection]) -> hgdet_core::Result<Vec<ImageRecord>> {
    join(&gt_by_image(gt), dets)
}

pub fn evaluate(gt: &CocoDataset, dets: &[Detection]) -> hgdet_core::Result<EvalReport> {
    let recs = records(gt, dets)?;
    Ok(EvalReport {
        n_images: recs.len(),
        n_gt: recs.iter().map(|r| r.gts.len()).sum(),
        n_detections: dets.len(),
        ap: ap_sweep(&recs, &ApParams::default()),
        froc: froc_curve(&recs)?,
    })
}

/// One model's FROC with its bootstrap band, as plotted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocEntry {
    pub label: String,
    pub ap_mean: Option<f64>,
    pub curve: FrocCurve,
    pub band: BootstrapBand,
}

pub fn froc_entry(label: &str, gt: &CocoDataset, dets: &[Detection], resamples: usize, seed: u64) -> hgdet_core::Result<FrocEntry> {
    let recs = records(gt, dets)?;
    Ok(FrocEntry {
        label: label.to_string(),
        ap_mean: ap_sweep(&recs, &ApParams::default()).ap_mean,
        curve: froc_curve(&recs)?,
        band: bootstrap_froc(&recs, resamples, seed)?,
    })
}

//! Batched inference with letterboxing and post-processing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hgdet_core::data::{letterbox, Image, Sample};
use hgdet_core::geometry::{postprocess, BoxN, BoxPx, PostprocessParams};
use hgdet_core::Detection;
use hgdet_model::Detector;

/// Pixel-space detections for every sample, after score filtering,
/// Soft-NMS and the per-image cap.
pub fn predict(model: &Detector, samples: &[Sample], post: &PostprocessParams, batch_size: usize) -> Result<Vec<Detection>> {
    let (w, h) = model.config().input_size;
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let fitted: Vec<_> = chunk.iter().map(|s| letterbox(s, w, h)).collect();
        let images: Vec<&Image> = fitted.iter().map(|(s, _)| &s.image).collect();
        let ids: Vec<u64> = chunk.iter().map(|s| s.image_id).collect();
        let x = model.preprocess(&images)?;
        let fwd = model.forward(&x)?;
        for ((raw, (_, lb)), s) in model.detections(&fwd, &ids)?.into_iter().zip(&fitted).zip(chunk) {
            let restored: Vec<Detection<BoxN>> = raw
                .into_iter()
                .map(|d| Detection { bbox: lb.to_original(&d.bbox).clipped(), ..d })
                .collect();
            let (iw, ih) = (s.image.width as f64, s.image.height as f64);
            out.extend(postprocess(&restored, post).into_iter().map(|d| Detection::<BoxPx> {
                bbox: d.bbox.to_px(iw, ih),
                score: d.score,
                image_id: d.image_id,
            }));
        }
    }
    Ok(out)
}

/// Images of a directory (PNG/JPEG, sorted by name) as unannotated samples
/// with ids `first_id, first_id + 1, ...`, together with their file names.
pub fn load_image_dir(dir: &Path, first_id: u64) -> Result<(Vec<Sample>, Vec<PathBuf>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG or JPEG images in {}", dir.display());
    }
    let samples = files
        .iter()
        .zip(first_id..)
        .map(|(p, id)| {
            Ok(Sample {
                image: Image::open(p)?,
                gts: Vec::new(),
                image_id: id,
                stain: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, files))
}

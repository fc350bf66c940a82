use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Image, Sample, StainTag};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::geometry::{BoxPx, Corners, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stain: Option<StainTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    /// Pixel `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

fn default_category() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One record of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDetection {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Bookkeeping from [`load_coco`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    pub images: usize,
    pub annotations: usize,
    pub dropped_zero_area: usize,
    pub clipped: usize,
}

fn parse_records<T: for<'de> Deserialize<'de>>(
    root: &serde_json::Map<String, Value>,
    key: &str,
    path: &Path,
    required: bool,
) -> Result<Vec<T>> {
    let bad = |msg: String| Error::Coco {
        path: path.to_path_buf(),
        msg,
    };
    let arr = match root.get(key) {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(bad(format!("`{key}` is not an array"))),
        None if required => return Err(bad(format!("missing `{key}` array"))),
        None => return Ok(Vec::new()),
    };
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            T::deserialize(v).map_err(|e| {
                let id = v.get("id").map(|x| format!(" (id {x})")).unwrap_or_default();
                bad(format!("{key}[{i}]{id}: {e}"))
            })
        })
        .collect()
}

/// Parse a COCO annotation file, validating record by record.
pub fn read_coco(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Coco {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let Value::Object(root) = root else {
        return Err(Error::Coco {
            path: path.to_path_buf(),
            msg: "top level is not an object".into(),
        });
    };
    let ds = CocoDataset {
        images: parse_records(&root, "images", path, true)?,
        annotations: parse_records(&root, "annotations", path, true)?,
        categories: parse_records(&root, "categories", path, false)?,
    };
    let known: std::collections::HashSet<u64> = ds.images.iter().map(|im| im.id).collect();
    for (i, a) in ds.annotations.iter().enumerate() {
        if !known.contains(&a.image_id) {
            return Err(Error::Coco {
                path: path.to_path_buf(),
                msg: format!("annotations[{i}] (id {}): unknown image_id {}", a.id, a.image_id),
            });
        }
        if a.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Coco {
                path: path.to_path_buf(),
                msg: format!("annotations[{i}] (id {}): non-finite bbox", a.id),
            });
        }
    }
    Ok(ds)
}

pub fn write_coco(ds: &CocoDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ds)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// COCO records for in-memory samples; boxes go back to pixel `[x, y, w, h]`.
pub fn samples_to_coco(samples: &[Sample], file_name: impl Fn(&Sample) -> String) -> CocoDataset {
    let mut ds = CocoDataset {
        categories: vec![CocoCategory {
            id: 1,
            name: "cell".into(),
        }],
        ..Default::default()
    };
    for s in samples {
        let (w, h) = (s.image.width as f64, s.image.height as f64);
        ds.images.push(CocoImage {
            id: s.image_id,
            file_name: file_name(s),
            width: s.image.width as u32,
            height: s.image.height as u32,
            stain: s.stain,
        });
        for b in &s.gts {
            let px = b.to_px(w, h);
            ds.annotations.push(CocoAnnotation {
                id: ds.annotations.len() as u64 + 1,
                image_id: s.image_id,
                category_id: 1,
                bbox: px.to_xywh(),
                area: Some(px.area()),
                iscrowd: 0,
            });
        }
    }
    ds
}

/// Load images and boxes. Zero-area annotations are dropped and counted;
/// boxes poking out of the image are clipped to it.
pub fn load_coco(annotation_file: &Path, image_root: &Path) -> Result<(Vec<Sample>, LoadReport)> {
    let ds = read_coco(annotation_file)?;
    let mut report = LoadReport {
        images: ds.images.len(),
        ..Default::default()
    };
    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &ds.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut samples = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let path = image_root.join(&im.file_name);
        let image = Image::open(&path)?;
        if (image.width, image.height) != (im.width as usize, im.height as usize) {
            return Err(Error::Coco {
                path: annotation_file.to_path_buf(),
                msg: format!(
                    "image {} declares {}x{} but {} is {}x{}",
                    im.id,
                    im.width,
                    im.height,
                    path.display(),
                    image.width,
                    image.height
                ),
            });
        }
        let (w, h) = (im.width as f64, im.height as f64);
        let mut gts = Vec::new();
        for a in by_image.get(&im.id).map(Vec::as_slice).unwrap_or(&[]) {
            let px = BoxPx::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
            let clamped = px.clamped(w, h);
            if clamped.area() <= 0.0 {
                report.dropped_zero_area += 1;
                continue;
            }
            if clamped != px {
                report.clipped += 1;
            }
            gts.push(clamped.to_norm(w, h));
            report.annotations += 1;
        }
        samples.push(Sample {
            image,
            gts,
            image_id: im.id,
            stain: im.stain,
        });
    }
    if report.dropped_zero_area > 0 {
        log::warn!(
            "{}: dropped {} zero-area annotations",
            annotation_file.display(),
            report.dropped_zero_area
        );
    }
    Ok((samples, report))
}

/// Per-image pixel ground truth for evaluation, without touching pixels.
/// Zero-area boxes are skipped as in [`load_coco`].
pub fn gt_by_image(ds: &CocoDataset) -> BTreeMap<u64, Vec<GtBox>> {
    let mut out: BTreeMap<u64, Vec<GtBox>> = ds.images.iter().map(|im| (im.id, Vec::new())).collect();
    for a in &ds.annotations {
        let px = BoxPx::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
        if px.area() <= 0.0 {
            continue;
        }
        let area = a.area.unwrap_or(px.area());
        out.entry(a.image_id).or_default().push(GtBox { bbox: px, area });
    }
    out
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::Coco {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let Value::Array(arr) = root else {
        return Err(Error::Coco {
            path: path.to_path_buf(),
            msg: "results file is not an array".into(),
        });
    };
    arr.iter()
        .enumerate()
        .map(|(i, v)| {
            let d = CocoDetection::deserialize(v).map_err(|e| Error::Coco {
                path: path.to_path_buf(),
                msg: format!("[{i}]: {e}"),
            })?;
            Ok(Detection {
                bbox: BoxPx::from_xywh(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]),
                score: d.score,
                image_id: d.image_id,
            })
        })
        .collect()
}

pub fn write_detections(dets: &[Detection], path: &Path) -> Result<()> {
    let recs: Vec<CocoDetection> = dets
        .iter()
        .map(|d| CocoDetection {
            image_id: d.image_id,
            category_id: 1,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        })
        .collect();
    let text = serde_json::to_string_pretty(&recs)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

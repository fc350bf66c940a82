//! Samples, COCO ingestion, augmentation and the synthetic cell generator.

mod augment;
mod coco;
mod image;
mod synth;

pub use augment::{augment, AugmentationConfig};
pub use coco::{
    gt_by_image, load_coco, read_coco, read_detections, samples_to_coco, write_coco,
    write_detections,
    CocoAnnotation, CocoCategory, CocoDataset, CocoDetection, CocoImage, LoadReport,
};
pub use image::{letterbox, Image, Letterbox};
pub use synth::{synth_generate, write_dataset, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BoxN;

/// Stain of the source tissue; per-stain models are trained on filtered sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StainTag {
    Aldh1l1,
    Gfap,
    Synthetic,
}

impl std::str::FromStr for StainTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ALDH1L1" => Ok(StainTag::Aldh1l1),
            "GFAP" => Ok(StainTag::Gfap),
            "SYNTHETIC" => Ok(StainTag::Synthetic),
            other => Err(format!("unknown stain tag {other:?}")),
        }
    }
}

impl std::fmt::Display for StainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StainTag::Aldh1l1 => "ALDH1L1",
            StainTag::Gfap => "GFAP",
            StainTag::Synthetic => "SYNTHETIC",
        })
    }
}

/// One training or evaluation patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gts: Vec<BoxN>,
    pub image_id: u64,
    /// `None` for untagged records; such samples only pass an unset filter.
    pub stain: Option<StainTag>,
}

impl Sample {
    pub fn gts_valid(&self) -> bool {
        self.gts.iter().all(|b| {
            use crate::geometry::Corners;
            let [x0, y0, x1, y1] = b.corners();
            b.is_valid() && x0 >= -1e-9 && y0 >= -1e-9 && x1 <= 1.0 + 1e-9 && y1 <= 1.0 + 1e-9
        })
    }

    pub fn matches_stain(&self, filter: Option<StainTag>) -> bool {
        filter.is_none() || self.stain == filter
    }
}

/// Image-level random split; returns `(train, validation)`.
pub fn split_validation(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = ((samples.len() as f64) * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: std::collections::HashSet<usize> = idx[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

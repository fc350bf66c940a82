use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BoxN, Corners, MIN_EXTENT};

/// Photometric and geometric training augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Gaussian blur sigma in pixels; 0 disables.
    pub blur_sigma_range: (f64, f64),
    pub gamma_range: (f64, f64),
    /// Zoom about the image center; boxes leaving the frame are dropped.
    pub scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_h: 0.5,
            flip_v: 0.5,
            blur_sigma_range: (0.0, 1.0),
            gamma_range: (0.8, 1.25),
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            flip_h: 0.0,
            flip_v: 0.0,
            blur_sigma_range: (0.0, 0.0),
            gamma_range: (1.0, 1.0),
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        let range = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = ({lo}, {hi}) is not an ordered range >= {min}")))
            }
        };
        prob("flip_h", self.flip_h)?;
        prob("flip_v", self.flip_v)?;
        range("blur_sigma_range", self.blur_sigma_range, 0.0)?;
        range("gamma_range", self.gamma_range, f64::MIN_POSITIVE)?;
        range("scale_range", self.scale_range, f64::MIN_POSITIVE)
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Apply a random augmentation, moving boxes with the pixels.
///
/// Every random draw happens regardless of the outcome so that the rng
/// stream consumed per sample is fixed.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentationConfig, rng: &mut R) -> Sample {
    let do_h = rng.random::<f64>() < cfg.flip_h;
    let do_v = rng.random::<f64>() < cfg.flip_v;
    let scale = draw(rng, cfg.scale_range);
    let sigma = draw(rng, cfg.blur_sigma_range);
    let gamma = draw(rng, cfg.gamma_range);

    let mut image = s.image.clone();
    let mut gts = s.gts.clone();
    if do_h {
        image = image.flip_h();
        for b in &mut gts {
            b.cx = 1.0 - b.cx;
        }
    }
    if do_v {
        image = image.flip_v();
        for b in &mut gts {
            b.cy = 1.0 - b.cy;
        }
    }
    if scale != 1.0 {
        image = zoom(&image, scale as f32);
        gts = gts.into_iter().filter_map(|b| zoom_box(&b, scale)).collect();
    }
    if sigma > 0.0 {
        image = Image::from_rgb32f(&image::imageops::blur(&image.to_rgb32f(), sigma as f32));
    }
    if gamma != 1.0 {
        let g = gamma as f32;
        for v in &mut image.data {
            *v = v.clamp(0.0, 1.0).powf(g);
        }
    }
    Sample {
        image,
        gts,
        image_id: s.image_id,
        stain: s.stain,
    }
}

fn zoom(img: &Image, scale: f32) -> Image {
    let fill = img.channel_means();
    let (cx, cy) = (img.width as f32 * 0.5, img.height as f32 * 0.5);
    let mut out = Image::filled(img.width, img.height, fill);
    for y in 0..img.height {
        for x in 0..img.width {
            let sx = (x as f32 + 0.5 - cx) / scale + cx - 0.5;
            let sy = (y as f32 + 0.5 - cy) / scale + cy - 0.5;
            out.set_pixel(x, y, img.sample_bilinear(sx, sy, fill));
        }
    }
    out
}

fn zoom_box(b: &BoxN, scale: f64) -> Option<BoxN> {
    let z = BoxN {
        cx: (b.cx - 0.5) * scale + 0.5,
        cy: (b.cy - 0.5) * scale + 0.5,
        w: b.w * scale,
        h: b.h * scale,
    };
    let [x0, y0, x1, y1] = z.corners();
    let visible_w = x1.min(1.0) - x0.max(0.0);
    let visible_h = y1.min(1.0) - y0.max(0.0);
    if visible_w < MIN_EXTENT || visible_h < MIN_EXTENT {
        return None;
    }
    Some(z.clipped())
}

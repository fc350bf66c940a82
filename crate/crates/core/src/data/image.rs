use std::path::Path;

use image::{Rgb, Rgb32FImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::BoxN;

/// RGB image, row-major HWC, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb32f(&img.to_rgb32f()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_rgb32f(img: &Rgb32FImage) -> Self {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn to_rgb32f(&self) -> Rgb32FImage {
        Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn flip_v(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers), `fill` outside the image.
    pub fn sample_bilinear(&self, x: f32, y: f32, fill: [f32; 3]) -> [f32; 3] {
        if x < -0.5 || y < -0.5 || x > self.width as f32 - 0.5 || y > self.height as f32 - 0.5 {
            return fill;
        }
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let (a, b, c, d) = (
            self.pixel(x0, y0),
            self.pixel(x1, y0),
            self.pixel(x0, y1),
            self.pixel(x1, y1),
        );
        let mut out = [0f32; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

/// Mapping from an original patch into the model's input canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub orig_width: usize,
    pub orig_height: usize,
    pub width: usize,
    pub height: usize,
}

impl Letterbox {
    /// Normalized canvas box -> normalized original-image box.
    pub fn to_original(&self, b: &BoxN) -> BoxN {
        let sx = self.width as f64 / (self.orig_width as f64 * self.scale);
        let sy = self.height as f64 / (self.orig_height as f64 * self.scale);
        BoxN {
            cx: b.cx * sx,
            cy: b.cy * sy,
            w: b.w * sx,
            h: b.h * sy,
        }
    }

    pub fn to_canvas(&self, b: &BoxN) -> BoxN {
        let sx = self.orig_width as f64 * self.scale / self.width as f64;
        let sy = self.orig_height as f64 * self.scale / self.height as f64;
        BoxN {
            cx: b.cx * sx,
            cy: b.cy * sy,
            w: b.w * sx,
            h: b.h * sy,
        }
    }
}

/// Fit a sample into a `width x height` canvas without distorting its
/// aspect ratio: shrink if needed, then pad right/bottom with the image's
/// channel means. Smaller images are padded, never enlarged.
pub fn letterbox(s: &Sample, width: usize, height: usize) -> (Sample, Letterbox) {
    let (ow, oh) = (s.image.width, s.image.height);
    let scale = (width as f64 / ow as f64).min(height as f64 / oh as f64).min(1.0);
    let lb = Letterbox {
        scale,
        orig_width: ow,
        orig_height: oh,
        width,
        height,
    };
    if ow == width && oh == height {
        return (s.clone(), lb);
    }
    let src = if scale < 1.0 {
        let nw = ((ow as f64 * scale).round() as u32).max(1);
        let nh = ((oh as f64 * scale).round() as u32).max(1);
        Image::from_rgb32f(&image::imageops::resize(
            &s.image.to_rgb32f(),
            nw,
            nh,
            image::imageops::FilterType::Triangle,
        ))
    } else {
        s.image.clone()
    };
    let mut canvas = Image::filled(width, height, s.image.channel_means());
    for y in 0..src.height.min(height) {
        for x in 0..src.width.min(width) {
            canvas.set_pixel(x, y, src.pixel(x, y));
        }
    }
    let out = Sample {
        image: canvas,
        gts: s.gts.iter().map(|b| lb.to_canvas(b)).collect(),
        image_id: s.image_id,
        stain: s.stain,
    };
    (out, lb)
}

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{samples_to_coco, write_coco, Image, Sample, StainTag};
use crate::error::{Error, Result};
use crate::geometry::BoxN;

/// Parameters of the synthetic cell-image generator. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub image_size: usize,
    pub cells_per_image: (usize, usize),
    /// Soma semi-axis range in pixels.
    pub radius_range: (f64, f64),
    pub branch_range: (usize, usize),
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Id of the first image; later images count up from it.
    pub first_id: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 20,
            image_size: 128,
            cells_per_image: (5, 5),
            radius_range: (4.0, 8.0),
            branch_range: (3, 6),
            noise_level: 0.03,
            seed: 7,
            first_id: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.cells_per_image.0 > self.cells_per_image.1 {
            return bad("cells_per_image is not ordered");
        }
        if self.branch_range.0 > self.branch_range.1 {
            return bad("branch_range is not ordered");
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && 2.0 * r1 < self.image_size as f64) {
            return bad("radius_range must be positive, ordered and fit the image");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be non-negative");
        }
        Ok(())
    }
}

const BACKGROUND: [f32; 3] = [0.86, 0.82, 0.76];
const STAIN: [f32; 3] = [0.42, 0.26, 0.14];

struct Cell {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    branches: Vec<(f64, f64, f64)>,
}

impl Cell {
    /// Tight box of the rotated ellipse, in pixels.
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }
}

/// Generate a reproducible dataset of stained-cell-like images with the
/// tight bounding box of every soma as ground truth.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_images)
        .map(|i| generate_one(spec, spec.first_id + i as u64, &mut rng))
        .collect())
}

fn generate_one(spec: &SynthSpec, image_id: u64, rng: &mut ChaCha8Rng) -> Sample {
    let size = spec.image_size;
    let n_cells = rng.random_range(spec.cells_per_image.0..=spec.cells_per_image.1);
    let mut cells: Vec<Cell> = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let mut cell = random_cell(spec, rng);
        // Rejection keeps somata apart; after enough tries overlap is allowed
        // so the requested count is always met.
        for _ in 0..200 {
            let clear = cells.iter().all(|o| {
                let d = ((o.cx - cell.cx).powi(2) + (o.cy - cell.cy).powi(2)).sqrt();
                d > 1.2 * (o.a.max(o.b) + cell.a.max(cell.b))
            });
            if clear {
                break;
            }
            cell = random_cell(spec, rng);
        }
        cells.push(cell);
    }

    let texture = value_noise(size, rng);
    let noise = Normal::new(0.0, spec.noise_level.max(1e-12)).expect("positive std");
    let mut image = Image::filled(size, size, BACKGROUND);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut alpha = 0f64;
            for c in &cells {
                alpha = alpha.max(cell_alpha(c, px, py));
            }
            let t = texture[y * size + x];
            let mut rgb = [0f32; 3];
            for ch in 0..3 {
                let bg = BACKGROUND[ch] as f64 * (0.92 + 0.16 * t);
                rgb[ch] = (bg * (1.0 - alpha) + STAIN[ch] as f64 * alpha) as f32;
            }
            image.set_pixel(x, y, rgb);
        }
    }
    if spec.noise_level > 0.0 {
        for v in &mut image.data {
            *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }

    let s = size as f64;
    let gts = cells
        .iter()
        .map(|c| {
            let (ex, ey) = c.half_extents();
            BoxN {
                cx: c.cx / s,
                cy: c.cy / s,
                w: 2.0 * ex / s,
                h: 2.0 * ey / s,
            }
        })
        .collect();
    Sample {
        image,
        gts,
        image_id,
        stain: Some(StainTag::Synthetic),
    }
}

fn random_cell(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Cell {
    let (r0, r1) = spec.radius_range;
    let a = if r0 == r1 { r0 } else { rng.random_range(r0..=r1) };
    let b = a * rng.random_range(0.65..=1.0);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let mut cell = Cell {
        cx: 0.0,
        cy: 0.0,
        a,
        b,
        theta,
        branches: Vec::new(),
    };
    let (ex, ey) = cell.half_extents();
    let s = spec.image_size as f64;
    cell.cx = rng.random_range(ex + 1.0..=s - ex - 1.0);
    cell.cy = rng.random_range(ey + 1.0..=s - ey - 1.0);
    let n_br = rng.random_range(spec.branch_range.0..=spec.branch_range.1);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    cell.branches = (0..n_br)
        .map(|k| {
            let ang = phase + std::f64::consts::TAU * k as f64 / n_br.max(1) as f64 + rng.random_range(-0.3..=0.3);
            let len = a * rng.random_range(1.4..=2.4);
            let strength = rng.random_range(0.35..=0.6);
            (ang, len, strength)
        })
        .collect();
    cell
}

/// Opacity of one cell at a pixel: a soft-edged ellipse plus faint tapered
/// radial strokes.
fn cell_alpha(c: &Cell, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - c.cx, py - c.cy);
    let reach = c.a * 2.6;
    if dx.abs() > reach || dy.abs() > reach {
        return 0.0;
    }
    let (s, co) = c.theta.sin_cos();
    let u = (dx * co + dy * s) / c.a;
    let v = (-dx * s + dy * co) / c.b;
    let r = (u * u + v * v).sqrt();
    // Edge falloff of roughly one pixel around the unit contour.
    let edge = 1.0 / (c.a.min(c.b));
    let soma = 0.9 * smoothstep(1.0 + edge, 1.0 - edge, r);
    let mut branch = 0f64;
    for &(ang, len, strength) in &c.branches {
        let (bs, bc) = ang.sin_cos();
        let t = (dx * bc + dy * bs).clamp(0.0, len);
        let d = ((dx - t * bc).powi(2) + (dy - t * bs).powi(2)).sqrt();
        let width = 0.9 * (1.0 - 0.7 * t / len);
        branch = branch.max(strength * (1.0 - t / len).sqrt() * (-0.5 * (d / width).powi(2)).exp());
    }
    soma.max(branch)
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise in `[0, 1]`.
fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0f64; size * size];
    for (cell_px, weight) in [(16usize, 0.65), (6usize, 0.35)] {
        let n = size / cell_px + 2;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            for x in 0..size {
                let fx = x as f64 / cell_px as f64;
                let fy = y as f64 / cell_px as f64;
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (smoothstep(0.0, 1.0, fx.fract()), smoothstep(0.0, 1.0, fy.fract()));
                let at = |i: usize, j: usize| lattice[j * n + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * size + x] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Write `images/<id>.png` plus one `annotations.json` under `dir`; returns
/// the annotation path.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let name = |s: &Sample| format!("images/{:06}.png", s.image_id);
    for s in samples {
        s.image.save_png(&dir.join(name(s)))?;
    }
    let ann = dir.join("annotations.json");
    write_coco(&samples_to_coco(samples, name), &ann)?;
    Ok(ann)
}

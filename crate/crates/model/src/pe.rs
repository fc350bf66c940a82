//! Fixed 2D sinusoidal positional encoding.

use std::f64::consts::TAU;

use candle_core::{DType, Device, Tensor};

use crate::error::{ModelError, Result};

const TEMPERATURE: f64 = 10_000.0;

/// Row-major `h x w x d` table. The first `d/2` channels encode the row,
/// the last `d/2` the column; within each half, channel pairs hold
/// `(sin, cos)` of `2*pi*index/size` at geometrically spaced frequencies.
pub fn positional_encoding_2d(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding width {d} is not divisible by 4"
        )));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| TEMPERATURE.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        let py = y as f64 / h as f64 * TAU;
        for x in 0..w {
            let px = x as f64 / w as f64 * TAU;
            let cell = &mut out[(y * w + x) * d..(y * w + x + 1) * d];
            for (i, f) in freqs.iter().enumerate() {
                cell[2 * i] = (py * f).sin();
                cell[2 * i + 1] = (py * f).cos();
                cell[half + 2 * i] = (px * f).sin();
                cell[half + 2 * i + 1] = (px * f).cos();
            }
        }
    }
    Ok(out)
}

/// The encoding as an `(h*w, d)` tensor.
pub fn pe_tensor(h: usize, w: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v = positional_encoding_2d(h, w, d)?;
    Ok(Tensor::from_vec(v, (h * w, d), device)?.to_dtype(dtype)?)
}

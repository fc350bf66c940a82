//! Heatmap-seeded query initialization.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use hgdet_core::heatmap::Peak;

use crate::error::{ModelError, Result};
use crate::pe::pe_tensor;
use crate::sample::bilinear_sample;

/// Additive attention bias that removes padded slots.
pub const MASK_BIAS: f64 = -1e9;

/// Per-image query slots, padded to `K`.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `(B, K, d)`; padded slots are zero.
    pub vectors: Tensor,
    /// Normalized anchor per slot; padded slots sit at the image center.
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub valid: Vec<Vec<bool>>,
}

impl QuerySet {
    pub fn k(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    /// `(B, K, 2)` anchor tensor matching the query dtype.
    pub fn anchor_tensor(&self) -> Result<Tensor> {
        let b = self.anchors.len();
        let flat: Vec<f64> = self.anchors.iter().flatten().flat_map(|&(x, y)| [x, y]).collect();
        let t = Tensor::from_vec(flat, (b, self.k(), 2), self.vectors.device())?;
        Ok(t.to_dtype(self.vectors.dtype())?)
    }

    /// `(B, K)` self-attention key bias: 0 for valid slots, [`MASK_BIAS`] otherwise.
    pub fn key_bias(&self) -> Result<Tensor> {
        let b = self.valid.len();
        let flat: Vec<f64> = self
            .valid
            .iter()
            .flatten()
            .map(|&v| if v { 0.0 } else { MASK_BIAS })
            .collect();
        let t = Tensor::from_vec(flat, (b, self.k()), self.vectors.device())?;
        Ok(t.to_dtype(self.vectors.dtype())?)
    }

    pub fn n_valid(&self, image: usize) -> usize {
        self.valid[image].iter().filter(|&&v| v).count()
    }
}

/// Build `K` queries per image from `p2 (B, d, H, W)` and per-image peaks.
///
/// Each valid slot projects `[f, u~, v~, PE(u, v)]` through `phi`, where `f`
/// is `p2` sampled at the peak and `(u~, v~)` is the cell-center anchor.
pub fn init_queries(p2: &Tensor, peaks: &[Vec<Peak>], phi: &Linear, k: usize) -> Result<QuerySet> {
    let (b, d, h, w) = p2.dims4()?;
    if peaks.len() != b {
        return Err(ModelError::Shape(format!("{} peak lists for a batch of {b}", peaks.len())));
    }
    let pe = pe_tensor(h, w, d, p2.dtype(), p2.device())?;
    let mut vectors = Vec::with_capacity(b);
    let mut anchors = Vec::with_capacity(b);
    let mut valid = Vec::with_capacity(b);
    for (i, img_peaks) in peaks.iter().enumerate() {
        let n = img_peaks.len().min(k);
        let used = &img_peaks[..n];
        let mut a: Vec<(f64, f64)> = used.iter().map(|p| p.normalized(w, h)).collect();
        let mut parts = Vec::with_capacity(2);
        if n > 0 {
            if used.iter().any(|p| p.u >= w || p.v >= h) {
                return Err(ModelError::Shape(format!("peak outside the {w}x{h} grid")));
            }
            let points: Vec<(f64, f64)> = used.iter().map(|p| (p.u as f64, p.v as f64)).collect();
            let f = bilinear_sample(&p2.get(i)?, &points)?;
            let coords: Vec<f64> = a.iter().flat_map(|&(x, y)| [x, y]).collect();
            let coords = Tensor::from_vec(coords, (n, 2), p2.device())?.to_dtype(p2.dtype())?;
            let rows: Vec<u32> = used.iter().map(|p| (p.v * w + p.u) as u32).collect();
            let rows = Tensor::from_vec(rows, n, p2.device())?;
            let pos = pe.index_select(&rows, 0)?;
            let x = Tensor::cat(&[&f, &coords, &pos], 1)?;
            parts.push(phi.forward(&x)?);
        }
        if n < k {
            parts.push(Tensor::zeros((k - n, d), p2.dtype(), p2.device())?);
            a.resize(k, (0.5, 0.5));
        }
        vectors.push(Tensor::cat(&parts, 0)?);
        anchors.push(a);
        let mut v = vec![true; n];
        v.resize(k, false);
        valid.push(v);
    }
    Ok(QuerySet {
        vectors: Tensor::stack(&vectors, 0)?,
        anchors,
        valid,
    })
}

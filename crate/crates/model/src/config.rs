use hgdet_core::geometry::DecodeParams;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Resnet50,
    TinyCnn,
}

/// Architecture hyper-parameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Query and memory width.
    pub d: usize,
    /// Number of heatmap-seeded queries.
    pub k: usize,
    /// Decoder layers.
    pub layers: usize,
    pub n_head: usize,
    /// Feed-forward hidden width in the decoder.
    pub ffn_dim: usize,
    /// Heads of the self-attention block applied at c4.
    pub c4_heads: usize,
    /// Feed-forward expansion of the c4 block.
    pub c4_ffn_mult: usize,
    /// Channel widths of the four tiny-cnn stages (strides 2, 4, 8, 16).
    pub tiny_widths: [usize; 4],
    pub s_delta: f64,
    pub w0: f64,
    pub h0: f64,
    /// `(width, height)` of the network input.
    pub input_size: (usize, usize),
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Resnet50,
            d: 256,
            k: 80,
            layers: 6,
            n_head: 8,
            ffn_dim: 1024,
            c4_heads: 8,
            c4_ffn_mult: 2,
            tiny_widths: [32, 64, 128, 256],
            s_delta: 0.3,
            w0: 0.08,
            h0: 0.08,
            input_size: (512, 512),
            pixel_mean: [0.5; 3],
            pixel_std: [0.25; 3],
        }
    }
}

impl ModelConfig {
    /// Small tiny-cnn configuration for desk-scale experiments and tests.
    pub fn tiny(input: usize) -> Self {
        ModelConfig {
            backbone: BackboneKind::TinyCnn,
            d: 64,
            k: 32,
            layers: 2,
            n_head: 4,
            ffn_dim: 128,
            c4_heads: 4,
            c4_ffn_mult: 2,
            tiny_widths: [16, 32, 64, 64],
            input_size: (input, input),
            ..Default::default()
        }
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            s_delta: self.s_delta,
            w0: self.w0,
            h0: self.h0,
        }
    }

    /// Width of the c4 feature map entering the transformer block.
    pub fn c4_channels(&self) -> usize {
        match self.backbone {
            BackboneKind::Resnet50 => 1024,
            BackboneKind::TinyCnn => self.tiny_widths[3],
        }
    }

    /// `(width, height)` of the stride-4 heatmap grid.
    pub fn grid_size(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.n_head == 0 || self.d % self.n_head != 0 {
            return bad(format!("d = {} is not divisible by n_head = {}", self.d, self.n_head));
        }
        if self.d % 4 != 0 {
            return bad(format!("d = {} must be divisible by 4 for 2D positional encoding", self.d));
        }
        let c4 = self.c4_channels();
        if self.c4_heads == 0 || c4 % self.c4_heads != 0 || c4 % 4 != 0 {
            return bad(format!("c4 width {c4} incompatible with {} heads", self.c4_heads));
        }
        if self.k == 0 || self.layers == 0 {
            return bad("k and layers must be at least 1".into());
        }
        let (w, h) = self.input_size;
        if w == 0 || h == 0 || w % 16 != 0 || h % 16 != 0 {
            return bad(format!("input size {w}x{h} is not divisible by 16"));
        }
        if !(self.s_delta > 0.0 && self.w0 > 0.0 && self.h0 > 0.0) {
            return bad("s_delta, w0 and h0 must be positive".into());
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return bad("pixel_std must be positive".into());
        }
        Ok(())
    }
}

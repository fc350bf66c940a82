//! Query decoder and prediction heads.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::Result;
use crate::nn::{linear, linear_const, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::Init;

/// Pre-norm self-attention, cross-attention and feed-forward with residuals.
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &Init, d: usize, n_head: usize, ffn_dim: usize) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: LayerNorm::new(&init.pp("norm1"), d)?,
            self_attn: MultiHeadAttention::new(&init.pp("self_attn"), d, n_head)?,
            norm2: LayerNorm::new(&init.pp("norm2"), d)?,
            cross_attn: MultiHeadAttention::new(&init.pp("cross_attn"), d, n_head)?,
            norm3: LayerNorm::new(&init.pp("norm3"), d)?,
            ffn: FeedForward::new(&init.pp("ffn"), d, ffn_dim)?,
        })
    }

    pub fn forward(&self, q: &Tensor, key_bias: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h, &h, Some(key_bias))?)?;
        let h = self.norm2.forward(&q)?;
        let q = (&q + self.cross_attn.forward(&h, memory, memory, None)?)?;
        Ok((&q + self.ffn.forward(&self.norm3.forward(&q)?)?)?)
    }
}

/// Raw head outputs for every slot.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `(B, K)` pre-sigmoid foreground scores.
    pub logits: Tensor,
    /// `(B, K, 4)` as `(dx, dy, dlogw, dlogh)`.
    pub deltas: Tensor,
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    cls: Linear,
    box_hidden: Linear,
    box_out: Linear,
}

impl Decoder {
    pub fn new(init: &Init, d: usize, layers: usize, n_head: usize, ffn_dim: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(&init.pp(format!("layers.{i}")), d, n_head, ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let cls_init = init.pp("cls");
        let bound = 1.0 / (d as f64).sqrt();
        // prior foreground probability 0.01
        let cls = Linear::new(
            cls_init.uniform("weight", &[1, d], bound)?,
            Some(cls_init.constant("bias", &[1], -(99f64).ln())?),
        );
        Ok(Decoder {
            layers,
            norm: LayerNorm::new(&init.pp("norm"), d)?,
            cls,
            box_hidden: linear(&init.pp("box.0"), d, d)?,
            // zero offsets at start: boxes begin at the anchor with the default size
            box_out: linear_const(&init.pp("box.1"), d, 4, 0.0, 0.0)?,
        })
    }

    /// `queries (B, K, d)`, `key_bias (B, K)`, `memory (B, N, d)`.
    pub fn forward(&self, queries: &Tensor, key_bias: &Tensor, memory: &Tensor) -> Result<DecoderOutput> {
        let mut q = queries.clone();
        for layer in &self.layers {
            q = layer.forward(&q, key_bias, memory)?;
        }
        let q = self.norm.forward(&q)?;
        let logits = self.cls.forward(&q)?.squeeze(2)?;
        let deltas = self.box_out.forward(&self.box_hidden.forward(&q)?.silu()?)?;
        Ok(DecoderOutput { logits, deltas })
    }
}

//! Layer building blocks. Everything here is composed from primitive candle
//! ops so gradients flow in both f32 and f64.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};

use crate::error::Result;
use crate::ops::softmax_last;
use crate::params::{Init, ParamStore};

/// Fully connected layer with PyTorch-style uniform initialization.
pub fn linear(init: &Init, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = init.uniform("weight", &[fan_out, fan_in], bound)?;
    let b = init.uniform("bias", &[fan_out], bound)?;
    Ok(Linear::new(w, Some(b)))
}

/// Linear layer with Xavier-uniform weights and zero bias.
pub fn linear_xavier(init: &Init, fan_in: usize, fan_out: usize) -> Result<Linear> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = init.uniform("weight", &[fan_out, fan_in], bound)?;
    let b = init.constant("bias", &[fan_out], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_const(init: &Init, fan_in: usize, fan_out: usize, w: f64, b: f64) -> Result<Linear> {
    let w = init.constant("weight", &[fan_out, fan_in], w)?;
    let b = init.constant("bias", &[fan_out], b)?;
    Ok(Linear::new(w, Some(b)))
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

pub fn conv2d(init: &Init, s: ConvSpec) -> Result<Conv2d> {
    let fan_in = s.cin * s.k * s.k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = init.uniform("weight", &[s.cout, s.cin, s.k, s.k], bound)?;
    let b = if s.bias {
        Some(init.uniform("bias", &[s.cout], bound)?)
    } else {
        None
    };
    let cfg = Conv2dConfig {
        padding: s.k / 2,
        stride: s.stride,
        ..Default::default()
    };
    Ok(Conv2d::new(w, b, cfg))
}

pub fn group_norm(init: &Init, channels: usize, groups: usize) -> Result<GroupNorm> {
    let w = init.constant("weight", &[channels], 1.0)?;
    let b = init.constant("bias", &[channels], 0.0)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &Init, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: init.constant("weight", &[dim], 1.0)?,
            bias: init.constant("bias", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Batch norm with frozen statistics and affine parameters, stored under
/// torchvision names so pretrained weights can be loaded.
pub struct FrozenBatchNorm {
    store: ParamStore,
    keys: [String; 4],
}

impl FrozenBatchNorm {
    pub fn new(init: &Init, channels: usize) -> Result<Self> {
        Ok(FrozenBatchNorm {
            store: init.store().clone(),
            keys: [
                init.buffer("weight", &[channels], 1.0)?,
                init.buffer("bias", &[channels], 0.0)?,
                init.buffer("running_mean", &[channels], 0.0)?,
                init.buffer("running_var", &[channels], 1.0)?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [w, b, m, v] = [0, 1, 2, 3].map(|i| self.store.buffer(&self.keys[i]));
        let (w, b, m, v) = (w?, b?, m?, v?);
        let scale = (w / (v + 1e-5)?.sqrt()?)?;
        let shift = (b - (&m * &scale)?)?;
        let c = scale.dim(0)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

/// Multi-head scaled dot-product attention.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_head: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &Init, dim: usize, n_head: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: linear_xavier(&init.pp("q_proj"), dim, dim)?,
            k: linear_xavier(&init.pp("k_proj"), dim, dim)?,
            v: linear_xavier(&init.pp("v_proj"), dim, dim)?,
            o: linear_xavier(&init.pp("out_proj"), dim, dim)?,
            n_head,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.n_head, d / self.n_head))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query (B, Lq, d)`, `key`/`value (B, Lk, d)`; `key_bias (B, Lk)` is
    /// added to the attention logits (large negative values mask keys).
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let lk = key.dim(1)?;
        let hd = d / self.n_head;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let mut logits = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = key_bias {
            logits = logits.broadcast_add(&bias.reshape((b, 1, 1, lk))?)?;
        }
        let attn = softmax_last(&logits)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        Ok(self.o.forward(&out)?)
    }
}

/// Two-layer perceptron with a SiLU hidden activation.
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &Init, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            fc1: linear(&init.pp("fc1"), dim, hidden)?,
            fc2: linear(&init.pp("fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.silu()?)?)
    }
}

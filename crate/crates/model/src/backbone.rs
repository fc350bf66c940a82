//! Convolutional backbones, the c4 transformer block and the feature pyramid.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm};

use crate::config::{BackboneKind, ModelConfig};
use crate::error::{ModelError, Result};
use crate::nn::{conv2d, group_norm, ConvSpec, FeedForward, FrozenBatchNorm, LayerNorm, MultiHeadAttention};
use crate::params::Init;
use crate::pe::pe_tensor;

/// Backbone features at strides 4, 8 and 16.
pub struct BackboneFeatures {
    pub c2: Tensor,
    pub c3: Tensor,
    pub c4: Tensor,
}

/// Feature pyramid, each level `(B, d, H/s, W/s)`.
pub struct FeaturePyramid {
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.p2, &self.p3, &self.p4]
    }
}

struct ConvGn {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvGn {
    fn new(init: &Init, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let conv = conv2d(&init.pp("conv"), ConvSpec { cin, cout, k: 3, stride, bias: false })?;
        let norm = group_norm(&init.pp("norm"), cout, gn_groups(cout))?;
        Ok(ConvGn { conv, norm })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

fn gn_groups(channels: usize) -> usize {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Four stride-2 stages of two 3x3 convolutions each.
pub struct TinyCnn {
    stages: Vec<[ConvGn; 2]>,
}

impl TinyCnn {
    pub fn new(init: &Init, widths: [usize; 4]) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (i, &w) in widths.iter().enumerate() {
            let s = init.pp(format!("stage{i}"));
            stages.push([ConvGn::new(&s.pp("0"), cin, w, 2)?, ConvGn::new(&s.pp("1"), w, w, 1)?]);
            cin = w;
        }
        Ok(TinyCnn { stages })
    }

    pub fn forward(&self, x: &Tensor) -> Result<BackboneFeatures> {
        let mut outs = Vec::with_capacity(4);
        let mut h = x.clone();
        for [a, b] in &self.stages {
            h = b.forward(&a.forward(&h)?)?;
            outs.push(h.clone());
        }
        Ok(BackboneFeatures {
            c2: outs[1].clone(),
            c3: outs[2].clone(),
            c4: outs[3].clone(),
        })
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(init: &Init, cin: usize, planes: usize, stride: usize) -> Result<Self> {
        let cout = planes * 4;
        let conv = |name: &str, cin, cout, k, stride| {
            conv2d(&init.pp(name), ConvSpec { cin, cout, k, stride, bias: false })
        };
        let downsample = if stride != 1 || cin != cout {
            let ds = init.pp("downsample");
            Some((
                conv2d(&ds.pp("0"), ConvSpec { cin, cout, k: 1, stride, bias: false })?,
                FrozenBatchNorm::new(&ds.pp("1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: conv("conv1", cin, planes, 1, 1)?,
            bn1: FrozenBatchNorm::new(&init.pp("bn1"), planes)?,
            conv2: conv("conv2", planes, planes, 3, stride)?,
            bn2: FrozenBatchNorm::new(&init.pp("bn2"), planes)?,
            conv3: conv("conv3", planes, cout, 1, 1)?,
            bn3: FrozenBatchNorm::new(&init.pp("bn3"), cout)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet-50 stem and stages 1 to 3, with torchvision parameter names.
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: [Vec<Bottleneck>; 3],
}

impl ResNet50 {
    pub fn new(init: &Init) -> Result<Self> {
        let conv1 = conv2d(&init.pp("conv1"), ConvSpec { cin: 3, cout: 64, k: 7, stride: 2, bias: false })?;
        let bn1 = FrozenBatchNorm::new(&init.pp("bn1"), 64)?;
        let mut cin = 64;
        let mut make = |name: &str, planes: usize, blocks: usize, stride: usize| -> Result<Vec<Bottleneck>> {
            let l = init.pp(name);
            let mut v = Vec::with_capacity(blocks);
            for i in 0..blocks {
                v.push(Bottleneck::new(&l.pp(i), cin, planes, if i == 0 { stride } else { 1 })?);
                cin = planes * 4;
            }
            Ok(v)
        };
        let layers = [make("layer1", 64, 3, 1)?, make("layer2", 128, 4, 2)?, make("layer3", 256, 6, 2)?];
        Ok(ResNet50 { conv1, bn1, layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<BackboneFeatures> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        // inputs are non-negative after relu, so zero padding equals -inf padding
        let mut h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        let mut outs = Vec::with_capacity(3);
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        Ok(BackboneFeatures {
            c2: outs[0].clone(),
            c3: outs[1].clone(),
            c4: outs[2].clone(),
        })
    }
}

pub enum Backbone {
    Tiny(TinyCnn),
    Resnet(ResNet50),
}

impl Backbone {
    pub fn new(init: &Init, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.backbone {
            BackboneKind::TinyCnn => Backbone::Tiny(TinyCnn::new(init, cfg.tiny_widths)?),
            BackboneKind::Resnet50 => Backbone::Resnet(ResNet50::new(init)?),
        })
    }

    /// Channels of `(c2, c3, c4)`.
    pub fn channels(cfg: &ModelConfig) -> [usize; 3] {
        match cfg.backbone {
            BackboneKind::TinyCnn => [cfg.tiny_widths[1], cfg.tiny_widths[2], cfg.tiny_widths[3]],
            BackboneKind::Resnet50 => [256, 512, 1024],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<BackboneFeatures> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(ModelError::Shape(format!(
                "input must be (B, 3, H, W) with H, W divisible by 16, got {:?}",
                x.dims()
            )));
        }
        match self {
            Backbone::Tiny(b) => b.forward(x),
            Backbone::Resnet(b) => b.forward(x),
        }
    }
}

/// One pre-norm self-attention block over the flattened c4 map.
pub struct C4Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl C4Block {
    pub fn new(init: &Init, channels: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(C4Block {
            norm1: LayerNorm::new(&init.pp("norm1"), channels)?,
            attn: MultiHeadAttention::new(&init.pp("attn"), channels, heads)?,
            norm2: LayerNorm::new(&init.pp("norm2"), channels)?,
            ffn: FeedForward::new(&init.pp("ffn"), channels, channels * ffn_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let pe = pe_tensor(h, w, c, x.dtype(), x.device())?.unsqueeze(0)?;
        let n = self.norm1.forward(&tokens)?;
        let qk = n.broadcast_add(&pe)?;
        let tokens = (&tokens + self.attn.forward(&qk, &qk, &n, None)?)?;
        let tokens = (&tokens + self.ffn.forward(&self.norm2.forward(&tokens)?)?)?;
        Ok(tokens.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

/// Top-down pyramid: 1x1 laterals, nearest upsampling, 3x3 smoothing.
pub struct Fpn {
    laterals: [Conv2d; 3],
    outputs: [Conv2d; 3],
}

impl Fpn {
    pub fn new(init: &Init, channels: [usize; 3], d: usize) -> Result<Self> {
        let lat = |i: usize| {
            conv2d(&init.pp(format!("lateral{}", i + 2)), ConvSpec { cin: channels[i], cout: d, k: 1, stride: 1, bias: true })
        };
        let out = |i: usize| {
            conv2d(&init.pp(format!("output{}", i + 2)), ConvSpec { cin: d, cout: d, k: 3, stride: 1, bias: true })
        };
        Ok(Fpn {
            laterals: [lat(0)?, lat(1)?, lat(2)?],
            outputs: [out(0)?, out(1)?, out(2)?],
        })
    }

    pub fn forward(&self, f: &BackboneFeatures) -> Result<FeaturePyramid> {
        let l4 = self.laterals[2].forward(&f.c4)?;
        let l3 = self.laterals[1].forward(&f.c3)?;
        let l2 = self.laterals[0].forward(&f.c2)?;
        let t3 = (&l3 + upsample2x(&l4)?)?;
        let t2 = (&l2 + upsample2x(&t3)?)?;
        Ok(FeaturePyramid {
            p2: self.outputs[0].forward(&t2)?,
            p3: self.outputs[1].forward(&t3)?,
            p4: self.outputs[2].forward(&l4)?,
        })
    }
}

/// Nearest-neighbour 2x upsampling built from a broadcast, whose backward
/// accumulates into the input gradient. candle's `upsample_nearest2d`
/// backward overwrites it, which breaks inputs that have other consumers.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

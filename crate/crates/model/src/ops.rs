//! Differentiable elementwise helpers missing from candle's op set.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::Result;

struct Atan;

/// Storage offsets of a strided layout in row-major element order.
fn strided_offsets(layout: &Layout) -> Vec<usize> {
    let dims = layout.dims();
    let stride = layout.stride();
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..n {
        out.push(layout.start_offset() + idx.iter().zip(stride).map(|(i, s)| i * s).sum::<usize>());
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn map<T: Copy>(src: &[T], layout: &Layout, f: impl Fn(T) -> T) -> Vec<T> {
            match layout.contiguous_offsets() {
                Some((a, b)) => src[a..b].iter().map(|&x| f(x)).collect(),
                None => strided_offsets(layout).into_iter().map(|i| f(src[i])).collect(),
            }
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(map(v, layout, f32::atan)),
            CpuStorage::F64(v) => CpuStorage::F64(map(v, layout, f64::atan)),
            _ => candle_core::bail!("atan supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d/dx atan(x) = 1 / (1 + x^2)
        let denom = (arg.sqr()? + 1.0)?;
        Ok(Some(grad_res.div(&denom)?))
    }
}

pub fn atan(x: &Tensor) -> Result<Tensor> {
    Ok(x.apply_op1(Atan)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Softmax over the last dimension built from primitive ops so that it
/// participates in autodiff.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let m = x.max_keepdim(last)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(last)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

//! Bilinear feature sampling.

use candle_core::{Tensor, D};

use crate::error::{ModelError, Result};

/// Sample a `(C, H, W)` feature map at continuous grid points `(u, v)`
/// (cell centers at integers). Coordinates are clamped to the border.
/// Returns `(P, C)` and is differentiable with respect to `feat`.
pub fn bilinear_sample(feat: &Tensor, points: &[(f64, f64)]) -> Result<Tensor> {
    let (c, h, w) = feat.dims3()?;
    if points.is_empty() {
        return Err(ModelError::Shape("bilinear_sample needs at least one point".into()));
    }
    let flat = feat.reshape((c, h * w))?.t()?.contiguous()?;
    let n = points.len();
    let mut idx = [vec![0u32; n], vec![0u32; n], vec![0u32; n], vec![0u32; n]];
    let mut wts = [vec![0f64; n], vec![0f64; n], vec![0f64; n], vec![0f64; n]];
    for (p, &(u, v)) in points.iter().enumerate() {
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let corners = [
            (u0, v0, (1.0 - fu) * (1.0 - fv)),
            (u1, v0, fu * (1.0 - fv)),
            (u0, v1, (1.0 - fu) * fv),
            (u1, v1, fu * fv),
        ];
        for (k, &(cu, cv, wt)) in corners.iter().enumerate() {
            idx[k][p] = (cv * w + cu) as u32;
            wts[k][p] = wt;
        }
    }
    let device = feat.device();
    let mut out: Option<Tensor> = None;
    for k in 0..4 {
        let ids = Tensor::from_vec(std::mem::take(&mut idx[k]), n, device)?;
        let wt = Tensor::from_vec(std::mem::take(&mut wts[k]), (n, 1), device)?.to_dtype(feat.dtype())?;
        let term = flat.index_select(&ids, 0)?.broadcast_mul(&wt)?;
        out = Some(match out {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    let out = out.expect("four corners");
    debug_assert_eq!(out.dim(D::Minus1)?, c);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn feat() -> Tensor {
        // channel 0 is the column index, channel 1 the row index times 10
        let (h, w) = (3, 4);
        let mut v = vec![0f64; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = x as f64;
                v[h * w + y * w + x] = 10.0 * y as f64;
            }
        }
        Tensor::from_vec(v, (2, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn integer_points_are_exact() {
        let s = bilinear_sample(&feat(), &[(2.0, 1.0), (0.0, 0.0)]).unwrap();
        assert_eq!(s.to_vec2::<f64>().unwrap(), vec![vec![2.0, 10.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn midpoint_interpolates() {
        let s = bilinear_sample(&feat(), &[(0.5, 0.5), (9.0, -3.0)]).unwrap();
        let s = s.to_vec2::<f64>().unwrap();
        assert!((s[0][0] - 0.5).abs() < 1e-12 && (s[0][1] - 5.0).abs() < 1e-12);
        // clamped to the top-right corner
        assert_eq!(s[1], vec![3.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = Tensor::randn(0f64, 1.0, (3, 5, 6), &Device::Cpu).unwrap();
        let pts = [(1.3, 2.7), (4.9, 0.2), (0.0, 4.0)];
        let weights = Tensor::randn(0f64, 1.0, (3, 3), &Device::Cpu).unwrap();
        let f = |t: &Tensor| -> f64 {
            (bilinear_sample(t, &pts).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let var = Var::from_tensor(&base).unwrap();
        let loss = (bilinear_sample(var.as_tensor(), &pts).unwrap() * &weights).unwrap().sum_all().unwrap();
        let grad = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let flat = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..flat.len() {
            let mut a = flat.clone();
            let mut b = flat.clone();
            a[i] += eps;
            b[i] -= eps;
            let ta = Tensor::from_vec(a, (3, 5, 6), &Device::Cpu).unwrap();
            let tb = Tensor::from_vec(b, (3, 5, 6), &Device::Cpu).unwrap();
            let fd = (f(&ta) - f(&tb)) / (2.0 * eps);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1e-8);
            assert!(err < 1e-5 || (fd - grad[i]).abs() < 1e-9, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}

//! Nonparametric image-level bootstrap of the FROC curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::froc::{froc_curve_refs, froc_thresholds};
use super::{percentile_sorted, ImageRecord};
use crate::error::{Error, Result};

/// Pointwise mean and 95% percentile interval of FROC sensitivity and FPPI.
///
/// The interval is widened to contain the mean where the resampled
/// distribution is skewed enough for the mean to fall outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub thresholds: Vec<f64>,
    pub mean_fppi: Vec<f64>,
    pub lower_fppi: Vec<f64>,
    pub upper_fppi: Vec<f64>,
    /// `None` where no resample had any ground truth.
    pub mean_sensitivity: Vec<Option<f64>>,
    pub lower_sensitivity: Vec<Option<f64>>,
    pub upper_sensitivity: Vec<Option<f64>>,
    pub resamples: usize,
    pub seed: u64,
}

/// Resample `images` with replacement `resamples` times. Resample `b` draws
/// from a generator seeded with `seed + b`, so results do not depend on
/// evaluation order.
pub fn bootstrap_froc(images: &[ImageRecord], resamples: usize, seed: u64) -> Result<BootstrapBand> {
    if images.is_empty() {
        return Err(Error::Empty("bootstrap needs at least one image"));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let thresholds = froc_thresholds();
    let n_pts = thresholds.len();
    let mut fppi: Vec<Vec<f64>> = vec![Vec::with_capacity(resamples); n_pts];
    let mut sens: Vec<Vec<f64>> = vec![Vec::with_capacity(resamples); n_pts];
    for b in 0..resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
        let sample: Vec<&ImageRecord> = (0..images.len())
            .map(|_| &images[rng.random_range(0..images.len())])
            .collect();
        let curve = froc_curve_refs(&sample)?;
        for (i, p) in curve.points.iter().enumerate() {
            fppi[i].push(p.fppi);
            if let Some(s) = p.sensitivity {
                sens[i].push(s);
            }
        }
    }

    let summarize = |xs: &mut Vec<f64>| -> Option<(f64, f64, f64)> {
        if xs.is_empty() {
            return None;
        }
        xs.sort_by(f64::total_cmp);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let lo = percentile_sorted(xs, 2.5).min(mean);
        let hi = percentile_sorted(xs, 97.5).max(mean);
        Some((mean, lo, hi))
    };

    let mut band = BootstrapBand {
        thresholds,
        mean_fppi: Vec::with_capacity(n_pts),
        lower_fppi: Vec::with_capacity(n_pts),
        upper_fppi: Vec::with_capacity(n_pts),
        mean_sensitivity: Vec::with_capacity(n_pts),
        lower_sensitivity: Vec::with_capacity(n_pts),
        upper_sensitivity: Vec::with_capacity(n_pts),
        resamples,
        seed,
    };
    for i in 0..n_pts {
        let (m, lo, hi) = summarize(&mut fppi[i]).expect("every resample has fppi");
        band.mean_fppi.push(m);
        band.lower_fppi.push(lo);
        band.upper_fppi.push(hi);
        let s = summarize(&mut sens[i]);
        band.mean_sensitivity.push(s.map(|s| s.0));
        band.lower_sensitivity.push(s.map(|s| s.1));
        band.upper_sensitivity.push(s.map(|s| s.2));
    }
    Ok(band)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{GtBox, ScoredBox};
    use crate::geometry::BoxPx;

    fn image(id: u64, hit: bool, score: f64) -> ImageRecord {
        let g = BoxPx::from_xywh(0.0, 0.0, 10.0, 10.0);
        let d = if hit {
            BoxPx::from_xywh(2.0, 2.0, 6.0, 6.0)
        } else {
            BoxPx::from_xywh(50.0, 50.0, 6.0, 6.0)
        };
        ImageRecord {
            image_id: id,
            gts: vec![GtBox::new(g)],
            dets: vec![ScoredBox { bbox: d, score }],
        }
    }

    #[test]
    fn single_image_has_zero_width() {
        let band = bootstrap_froc(&[image(1, true, 0.7)], 50, 3).unwrap();
        for i in 0..19 {
            assert_eq!(band.lower_fppi[i], band.upper_fppi[i]);
            assert_eq!(band.lower_sensitivity[i], band.upper_sensitivity[i]);
            assert_eq!(band.mean_sensitivity[i], band.upper_sensitivity[i]);
        }
    }

    #[test]
    fn deterministic_and_ordered() {
        let imgs: Vec<_> = (0..12)
            .map(|i| image(i, i % 3 != 0, 0.1 + 0.07 * i as f64))
            .collect();
        let a = bootstrap_froc(&imgs, 200, 42).unwrap();
        let b = bootstrap_froc(&imgs, 200, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean_fppi.len(), 19);
        assert_eq!(a.lower_sensitivity.len(), 19);
        for i in 0..19 {
            assert!(a.lower_fppi[i] <= a.mean_fppi[i] && a.mean_fppi[i] <= a.upper_fppi[i]);
            let (l, m, u) = (
                a.lower_sensitivity[i].unwrap(),
                a.mean_sensitivity[i].unwrap(),
                a.upper_sensitivity[i].unwrap(),
            );
            assert!(l <= m && m <= u);
        }
        let c = bootstrap_froc(&imgs, 200, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_empty() {
        assert!(bootstrap_froc(&[], 10, 0).is_err());
        assert!(bootstrap_froc(&[image(1, true, 0.5)], 0, 0).is_err());
    }
}

use std::path::PathBuf;

use hgdet_core::data::{gt_by_image, read_coco, read_detections};
use hgdet_core::eval::{
    ap_sweep, bootstrap_froc, froc_curve, join, ApParams, GtBox, ImageRecord, ScoredBox,
};
use hgdet_core::BoxPx;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(serde::Deserialize)]
struct Reference {
    ap_mean: f64,
    ap_at_050: f64,
    ap_small: f64,
    ap_medium: f64,
    ap_per_threshold: Vec<f64>,
}

#[test]
fn ap_matches_pycocotools_on_random_fixture() {
    let ds = read_coco(&fixture("ap_random_gt.json")).unwrap();
    let dets = read_detections(&fixture("ap_random_dets.json")).unwrap();
    let images = join(&gt_by_image(&ds), &dets).unwrap();
    assert_eq!(images.len(), 10);
    let r = ap_sweep(&images, &ApParams::default());
    let reference: Reference =
        serde_json::from_str(&std::fs::read_to_string(fixture("ap_random_reference.json")).unwrap())
            .unwrap();
    let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() < 1e-6;
    assert!(close(r.ap_mean, reference.ap_mean), "{:?} vs {}", r.ap_mean, reference.ap_mean);
    assert!(close(r.ap_at_050, reference.ap_at_050));
    assert!(close(r.ap_small, reference.ap_small));
    assert!(close(r.ap_medium, reference.ap_medium));
    for (a, b) in r.ap_per_threshold.iter().zip(&reference.ap_per_threshold) {
        assert!(close(*a, *b));
    }
}

fn gt(x: f64, y: f64, w: f64, h: f64) -> GtBox {
    GtBox::new(BoxPx::from_xywh(x, y, w, h))
}

fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> ScoredBox {
    ScoredBox {
        bbox: BoxPx::from_xywh(x, y, w, h),
        score,
    }
}

#[test]
fn hand_traced_false_positive_first() {
    let images = vec![ImageRecord {
        image_id: 1,
        gts: vec![gt(100.0, 100.0, 30.0, 30.0)],
        dets: vec![det(300.0, 300.0, 30.0, 30.0, 0.9), det(100.0, 100.0, 30.0, 30.0, 0.8)],
    }];
    let r = ap_sweep(&images, &ApParams::default());
    assert!((r.ap_mean.unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn identical_predictions_score_one_everywhere() {
    let images: Vec<ImageRecord> = (0..3)
        .map(|i| {
            let gts = vec![gt(10.0, 10.0, 20.0, 30.0), gt(200.0, 50.0, 60.0, 40.0), gt(80.0, 300.0, 12.0, 12.0)];
            let dets = gts.iter().map(|g| ScoredBox { bbox: g.bbox, score: 1.0 }).collect();
            ImageRecord { image_id: i, gts, dets }
        })
        .collect();
    let r = ap_sweep(&images, &ApParams::default());
    assert_eq!(r.ap_mean, Some(1.0));
    assert!(r.ap_per_threshold.iter().all(|&a| a == Some(1.0)));
}

fn random_fixture(rng: &mut ChaCha8Rng) -> Vec<ImageRecord> {
    let n_images = rng.random_range(1..=6);
    (0..n_images)
        .map(|i| {
            let gts: Vec<GtBox> = (0..rng.random_range(0..6))
                .map(|_| gt(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), rng.random_range(5.0..60.0), rng.random_range(5.0..60.0)))
                .collect();
            let mut dets = Vec::new();
            for g in &gts {
                if rng.random_bool(0.7) {
                    let j = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.3..0.3) * s;
                    let (w, h) = (g.bbox.width(), g.bbox.height());
                    dets.push(det(g.bbox.x0 + j(rng, w), g.bbox.y0 + j(rng, h), w * (1.0 + j(rng, 1.0)), h * (1.0 + j(rng, 1.0)), rng.random_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.random_range(0..5) {
                dets.push(det(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), rng.random_range(5.0..60.0), rng.random_range(5.0..60.0), rng.random_range(0.0..1.0)));
            }
            ImageRecord { image_id: i, gts, dets }
        })
        .collect()
}

#[test]
fn froc_monotone_on_100_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let images = random_fixture(&mut rng);
        let c = froc_curve(&images).unwrap();
        assert_eq!(c.points.len(), 19);
        for w in c.points.windows(2) {
            assert!(w[1].threshold < w[0].threshold);
            assert!(w[1].fppi >= w[0].fppi);
            assert!(w[1].hits >= w[0].hits);
            if let (Some(a), Some(b)) = (w[0].sensitivity, w[1].sensitivity) {
                assert!(b >= a);
            }
        }
        for p in &c.points {
            assert!(p.hits <= c.n_gt);
        }
    }
}

#[test]
fn ap_non_increasing_in_iou_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let images = random_fixture(&mut rng);
        let r = ap_sweep(&images, &ApParams::default());
        let aps: Vec<f64> = r.ap_per_threshold.iter().flatten().copied().collect();
        for w in aps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{aps:?}");
        }
    }
}

#[test]
fn bootstrap_reproducible_and_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<ImageRecord> = (0..4).flat_map(|_| random_fixture(&mut rng)).collect();
    let a = bootstrap_froc(&images, 200, 42).unwrap();
    let b = bootstrap_froc(&images, 200, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mean_fppi.len(), 19);
    assert_eq!(a.upper_sensitivity.len(), 19);
    for i in 0..19 {
        assert!(a.lower_fppi[i] <= a.mean_fppi[i] && a.mean_fppi[i] <= a.upper_fppi[i]);
        if let (Some(l), Some(m), Some(u)) = (a.lower_sensitivity[i], a.mean_sensitivity[i], a.upper_sensitivity[i]) {
            assert!(l <= m && m <= u);
        }
    }
}

#[test]
fn bootstrap_band_coverage_is_logged() {
    // Coverage of the full-data curve is a sanity statistic, not a theorem.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut inside, mut total) = (0usize, 0usize);
    for _ in 0..20 {
        let images: Vec<ImageRecord> = (0..3).flat_map(|_| random_fixture(&mut rng)).collect();
        let full = froc_curve(&images).unwrap();
        let band = bootstrap_froc(&images, 200, 1).unwrap();
        for (i, p) in full.points.iter().enumerate() {
            if let (Some(s), Some(l), Some(u)) = (p.sensitivity, band.lower_sensitivity[i], band.upper_sensitivity[i]) {
                total += 1;
                inside += usize::from(l <= s && s <= u);
            }
        }
    }
    eprintln!("bootstrap band covers full-data sensitivity at {inside}/{total} points");
}

use hgdet_core::data::{
    augment, load_coco, samples_to_coco, synth_generate, write_coco, write_dataset,
    AugmentationConfig, Sample, SynthSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_images: 6,
        image_size: 40,
        cells_per_image: (1, 6),
        radius_range: (2.5, 5.0),
        seed,
        ..Default::default()
    }
}

#[test]
fn coco_roundtrip_is_lossless_for_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(&small_spec(9)).unwrap();
    let ann = write_dataset(&samples, dir.path()).unwrap();
    let (loaded, report) = load_coco(&ann, dir.path()).unwrap();
    assert_eq!(report.dropped_zero_area, 0);
    assert_eq!(loaded.len(), samples.len());

    // second trip through serialization
    let ann2 = dir.path().join("again.json");
    write_coco(&samples_to_coco(&loaded, |s| format!("images/{:06}.png", s.image_id)), &ann2).unwrap();
    let (again, _) = load_coco(&ann2, dir.path()).unwrap();
    for ((a, b), c) in samples.iter().zip(&loaded).zip(&again) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.stain, c.stain);
        assert_eq!(a.gts.len(), c.gts.len());
        for ((x, y), z) in a.gts.iter().zip(&b.gts).zip(&c.gts) {
            for i in 0..4 {
                assert!((x.to_array()[i] - y.to_array()[i]).abs() < 1e-9);
                assert!((x.to_array()[i] - z.to_array()[i]).abs() < 1e-9);
            }
        }
        // 8-bit PNG quantization bounds the pixel error
        assert!(a.image.data.iter().zip(&b.image.data).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

#[test]
fn synth_seed_reproducible_and_exact() {
    let spec = SynthSpec { n_images: 20, image_size: 64, cells_per_image: (5, 5), radius_range: (3.0, 6.0), seed: 7, ..Default::default() };
    let a = synth_generate(&spec).unwrap();
    assert_eq!(a, synth_generate(&spec).unwrap());
    for s in &a {
        assert_eq!(s.gts.len(), 5);
        assert!(s.gts_valid());
        assert!(s.gts.iter().all(|b| b.w * b.h > 0.0));
    }
}

fn flip_only(h: bool, v: bool) -> AugmentationConfig {
    AugmentationConfig {
        flip_h: if h { 1.0 } else { 0.0 },
        flip_v: if v { 1.0 } else { 0.0 },
        ..AugmentationConfig::identity()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_boxes_valid(seed in any::<u64>(), aug_seed in any::<u64>()) {
        let samples = synth_generate(&SynthSpec { n_images: 1, ..small_spec(seed) }).unwrap();
        let cfg = AugmentationConfig { scale_range: (0.6, 1.6), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
        let out: Sample = augment(&samples[0], &cfg, &mut rng);
        prop_assert!(out.gts.len() <= samples[0].gts.len());
        prop_assert!(out.gts_valid(), "{:?}", out.gts);
        prop_assert_eq!(out.image.data.len(), samples[0].image.data.len());

        // scale-free configurations never drop boxes
        let keep = AugmentationConfig { scale_range: (1.0, 1.0), ..Default::default() };
        prop_assert_eq!(augment(&samples[0], &keep, &mut rng).gts.len(), samples[0].gts.len());
    }

    #[test]
    fn flips_are_involutions(seed in any::<u64>(), h in any::<bool>(), v in any::<bool>()) {
        let s = &synth_generate(&SynthSpec { n_images: 1, ..small_spec(seed) }).unwrap()[0];
        let cfg = flip_only(h, v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let twice = augment(&augment(s, &cfg, &mut rng), &cfg, &mut rng);
        prop_assert_eq!(&twice.image, &s.image);
        for (a, b) in twice.gts.iter().zip(&s.gts) {
            for i in 0..4 {
                prop_assert!((a.to_array()[i] - b.to_array()[i]).abs() < 1e-12);
            }
        }
    }
}

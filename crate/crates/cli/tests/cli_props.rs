use std::path::Path;
use std::process::{Command, Output};

use candle_core::{DType, Device};
use hgdet::config::TrainConfig;
use hgdet::report::{evaluate, froc_entry};
use hgdet::train::{train, BEST_CHECKPOINT, LAST_CHECKPOINT, MANIFEST};
use hgdet::{infer, plot};
use hgdet_core::data::{samples_to_coco, synth_generate, AugmentationConfig, CocoDataset, Sample, SynthSpec};
use hgdet_core::geometry::{PostprocessParams, SoftNmsParams};
use hgdet_core::{BoxPx, Detection};
use hgdet_model::{Detector, ModelConfig};
use plotters::style::{Color, Palette, Palette99};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_set(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    synth_generate(&SynthSpec {
        n_images: n,
        image_size: size,
        radius_range: (3.0, 5.0),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick_config(size: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        warmup_epochs: 0,
        batch_size: 2,
        seed: 3,
        model: ModelConfig::tiny(size),
        ..Default::default()
    }
}

fn coco(samples: &[Sample]) -> CocoDataset {
    samples_to_coco(samples, |s| format!("{}.png", s.image_id))
}

#[test]
fn same_seed_gives_identical_first_epoch() {
    let data = small_set(4, 32, 1);
    let cfg = quick_config(32, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&cfg, &data, &[], a.path()).unwrap().manifest;
    let rb = train(&cfg, &data, &[], b.path()).unwrap().manifest;
    assert!((ra.epochs[0].train.total - rb.epochs[0].train.total).abs() < 1e-6);
    assert_eq!(ra.dataset_hashes, rb.dataset_hashes);
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, MANIFEST] {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn training_reduces_loss_and_tracks_validation() {
    let data = small_set(6, 32, 2);
    let val = small_set(2, 32, 20);
    let cfg = TrainConfig {
        augmentation: AugmentationConfig::identity(),
        ..quick_config(32, 8)
    };
    let dir = tempfile::tempdir().unwrap();
    let m = train(&cfg, &data, &val, dir.path()).unwrap().manifest;
    let (first, last) = (m.epochs[0].train.total, m.epochs[7].train.total);
    assert!(last < first, "loss {first} -> {last}");
    assert!(m.epochs.iter().all(|e| e.val.is_some()));
    let best = m.best_epoch.unwrap();
    let best_val = m.epochs[best].val.unwrap().total;
    assert!(m.epochs.iter().all(|e| e.val.unwrap().total >= best_val));
}

#[test]
fn stain_filter_that_removes_everything_is_an_error() {
    let data = small_set(2, 32, 4);
    let cfg = TrainConfig {
        stain: Some(hgdet_core::data::StainTag::Gfap),
        ..quick_config(32, 1)
    };
    let dir = tempfile::tempdir().unwrap();
    assert!(train(&cfg, &data, &[], dir.path()).is_err());
}

#[test]
fn inference_output_is_capped_per_image() {
    // 128 slots on a 64x64 grid of random logits leave well over 100 candidates
    let cfg = ModelConfig {
        k: 128,
        ..ModelConfig::tiny(256)
    };
    let model = Detector::inference(cfg, DType::F32, &Device::Cpu, 1).unwrap();
    let data = small_set(2, 256, 5);
    let keep_all = PostprocessParams {
        score_threshold: 0.0,
        nms: SoftNmsParams { score_floor: 0.0, ..Default::default() },
        max_detections: 100,
    };
    let dets = infer::predict(&model, &data, &keep_all, 2).unwrap();
    for s in &data {
        let n = dets.iter().filter(|d| d.image_id == s.image_id).count();
        assert_eq!(n, 100, "image {}", s.image_id);
    }
    let default = infer::predict(&model, &data, &PostprocessParams::default(), 2).unwrap();
    assert!(default.iter().all(|d| d.score >= 0.05));
    for d in &default {
        assert!(d.bbox.x0 >= 0.0 && d.bbox.y0 >= 0.0 && d.bbox.x1 <= 256.0 && d.bbox.y1 <= 256.0);
    }
}

fn as_detections(samples: &[Sample]) -> Vec<Detection> {
    samples
        .iter()
        .flat_map(|s| {
            let (w, h) = (s.image.width as f64, s.image.height as f64);
            s.gts.iter().map(move |g| Detection { bbox: g.to_px(w, h), score: 1.0, image_id: s.image_id })
        })
        .collect()
}

#[test]
fn perfect_predictions_score_one_and_orphans_are_named() {
    let data = small_set(3, 64, 6);
    let gt = coco(&data);
    let r = evaluate(&gt, &as_detections(&data)).unwrap();
    assert_eq!(r.ap.ap_mean, Some(1.0));
    assert_eq!(r.n_images, 3);
    let stray = Detection { bbox: BoxPx::from_xywh(1.0, 1.0, 5.0, 5.0), score: 0.5, image_id: 4242 };
    let err = evaluate(&gt, &[stray]).unwrap_err().to_string();
    assert!(err.contains("4242"), "{err}");
}

/// Detections that find each object with probability `recall`, plus
/// `fp` random false positives per image.
fn noisy_detections(samples: &[Sample], recall: f64, fp: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in as_detections(samples) {
        if rng.random_bool(recall) {
            out.push(Detection { score: rng.random_range(0.3..1.0), ..d });
        }
    }
    for s in samples {
        for _ in 0..fp {
            let bbox = BoxPx::from_xywh(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), 8.0, 8.0);
            out.push(Detection { bbox, score: rng.random_range(0.0..0.9), image_id: s.image_id });
        }
    }
    out
}

#[test]
fn froc_plot_has_one_band_per_model() {
    let data = small_set(20, 64, 8);
    let gt = coco(&data);
    let entries = vec![
        froc_entry("weak", &gt, &noisy_detections(&data, 0.5, 3, 1), 100, 0).unwrap(),
        froc_entry("strong", &gt, &noisy_detections(&data, 0.9, 1, 2), 100, 0).unwrap(),
    ];
    assert!(plot::legend_label(&entries[0]).contains("AP@[0.05:0.50] = "));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("froc.png");
    plot::plot_froc(&entries, &path).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (900, 650));
    // each band is its palette color at 18% over white
    for i in 0..entries.len() {
        let c = Palette99::pick(i).to_rgba().rgb();
        let want = [c.0, c.1, c.2].map(|v| 255.0 * 0.82 + f64::from(v) * 0.18);
        let hits = img
            .pixels()
            .filter(|p| p.0.iter().zip(want).all(|(&a, b)| (f64::from(a) - b).abs() <= 2.0))
            .count();
        assert!(hits > 50, "band {i} covers {hits} pixels");
    }
}

fn hgdet(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgdet"))
        .args(args)
        .env("HGDET_RUN_ROOT", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout: {text}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    text
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let runs = root.join("runs");

    ok(hgdet(&["synth", "--out", &p("data"), "--n-images", "4", "--image-size", "64", "--seed", "3"], &runs));
    let ann = p("data/annotations.json");
    let config = format!(
        "epochs = 2\nwarmup_epochs = 1\nbatch_size = 2\n[data]\ntrain_annotations = {:?}\ntrain_images = {:?}\nval_fraction = 0.25\n\
         [model]\nbackbone = \"tiny-cnn\"\nd = 32\nk = 16\nlayers = 1\nn_head = 4\nffn_dim = 64\nc4_heads = 4\n\
         tiny_widths = [8, 16, 32, 32]\ninput_size = [64, 64]\n",
        ann,
        p("data")
    );
    std::fs::write(root.join("train.toml"), config).unwrap();
    ok(hgdet(&["train", "--config", &p("train.toml"), "--run-name", "smoke"], &runs));
    let ckpt = runs.join("smoke").join(BEST_CHECKPOINT);
    assert!(ckpt.exists() && runs.join("smoke").join(MANIFEST).exists());
    let ckpt = ckpt.to_string_lossy().into_owned();

    ok(hgdet(&["infer", "--checkpoint", &ckpt, "--images", &p("data"), "--annotations", &ann, "--out", &p("pred.json")], &runs));
    let dets = hgdet_core::data::read_detections(&root.join("pred.json")).unwrap();
    assert!(dets.iter().all(|d| (1..=4).contains(&d.image_id) && d.score >= 0.05));

    ok(hgdet(&["infer", "--checkpoint", &ckpt, "--images", &p("data/images"), "--out", &p("dir_pred.json")], &runs));
    assert!(root.join("dir_pred.images.json").exists());

    ok(hgdet(&["eval", "--gt", &ann, "--predictions", &p("pred.json"), "--out", &p("report.json")], &runs));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 4);
    assert!(report["ap"].get("ap_at_050").is_some() && report["froc"]["points"].is_array());

    let models = [format!("a={}", p("pred.json")), format!("b={}", p("dir_pred.json"))];
    ok(hgdet(
        &["froc", "--gt", &ann, "--model", &models[0], "--model", &models[1], "--out", &p("froc.png"), "--report", &p("froc.json"), "--resamples", "20"],
        &runs,
    ));
    assert!(root.join("froc.png").exists());
    let froc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("froc.json")).unwrap()).unwrap();
    assert_eq!(froc.as_array().unwrap().len(), 2);

    std::fs::write(root.join("bad.safetensors"), b"not a checkpoint").unwrap();
    let bad = hgdet(&["infer", "--checkpoint", &p("bad.safetensors"), "--images", &p("data/images"), "--out", &p("x.json")], &runs);
    assert!(!bad.status.success());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}

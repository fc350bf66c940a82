use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use hgdet::config::TrainConfig;
use hgdet::{infer, plot, report, run_dir, train};
use hgdet_core::data::{load_coco, read_coco, read_detections, samples_to_coco, split_validation, synth_generate, write_coco, write_dataset, write_detections, SynthSpec};
use hgdet_core::geometry::{PostprocessParams, SoftNmsParams};
use hgdet_model::checkpoint;

#[derive(Parser)]
#[command(name = "hgdet", version, about = "Heatmap-seeded query detector: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cell dataset (PNG images + COCO annotations).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_images: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long, default_value_t = 5)]
        cells_min: usize,
        #[arg(long, default_value_t = 5)]
        cells_max: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        first_id: u64,
    },
    /// Train a model; outputs go to $HGDET_RUN_ROOT/<run-name>.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "default")]
        run_name: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict boxes for a directory of images or a COCO image list.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// COCO file naming the images (and their ids); otherwise every
        /// image in the directory is used with ids 1, 2, ... in name order.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        /// Detections scoring below this are dropped before Soft-NMS.
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_sigma: f64,
        /// Soft-NMS decays candidates overlapping a kept box at least this much.
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        #[arg(long, default_value_t = 100)]
        max_detections: usize,
    },
    /// AP sweep and FROC of a prediction file against COCO ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FROC curves with bootstrap bands for one or more models.
    Froc {
        #[arg(long)]
        gt: PathBuf,
        /// `label=predictions.json`, repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON dump of the plotted curves and bands.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n_images, image_size, cells_min, cells_max, seed, first_id } => {
            let spec = SynthSpec {
                n_images,
                image_size,
                cells_per_image: (cells_min, cells_max),
                seed,
                first_id,
                ..Default::default()
            };
            let samples = synth_generate(&spec)?;
            let ann = write_dataset(&samples, &out)?;
            println!("wrote {} images to {}", samples.len(), ann.display());
        }
        Command::Train { config, run_name, epochs, seed, lr } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.warmup_epochs = cfg.warmup_epochs.min(e);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            cfg.validate()?;
            let (samples, rep) = load_coco(&cfg.data.train_annotations, &cfg.data.train_images)?;
            log::info!("loaded {} images, {} boxes", rep.images, rep.annotations);
            let (train_set, val_set) = match (&cfg.data.val_annotations, &cfg.data.val_images) {
                (Some(a), Some(i)) => (samples, load_coco(a, i)?.0),
                (None, None) => split_validation(samples, cfg.data.val_fraction, cfg.seed),
                _ => bail!("val_annotations and val_images must be given together"),
            };
            let dir = run_dir(&run_name);
            let outcome = train::train(&cfg, &train_set, &val_set, &dir)?;
            println!(
                "best epoch {:?}; checkpoint {}",
                outcome.manifest.best_epoch,
                outcome.best_checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint: ckpt,
            images,
            annotations,
            out,
            batch_size,
            score_threshold,
            nms_sigma,
            nms_iou,
            max_detections,
        } => {
            if !(nms_sigma > 0.0) {
                bail!("--nms-sigma must be positive");
            }
            let model = checkpoint::load_inference(&ckpt, DType::F32, &Device::Cpu)?;
            let samples = match &annotations {
                Some(a) => load_coco(a, &images)?.0,
                None => {
                    let (samples, files) = infer::load_image_dir(&images, 1)?;
                    let index = samples_to_coco(&samples, |s| {
                        files[(s.image_id - 1) as usize].file_name().map_or(String::new(), |f| f.to_string_lossy().into_owned())
                    });
                    let index_path = out.with_extension("images.json");
                    write_coco(&index, &index_path)?;
                    println!("image index written to {}", index_path.display());
                    samples
                }
            };
            let post = PostprocessParams {
                score_threshold,
                nms: SoftNmsParams { sigma: nms_sigma, iou_threshold: nms_iou, ..Default::default() },
                max_detections,
            };
            let dets = infer::predict(&model, &samples, &post, batch_size)?;
            write_detections(&dets, &out)?;
            println!("{} detections on {} images written to {}", dets.len(), samples.len(), out.display());
        }
        Command::Eval { gt, predictions, out } => {
            let gt = read_coco(&gt)?;
            let dets = read_detections(&predictions)?;
            let rep = report::evaluate(&gt, &dets)?;
            write_json(&rep, &out)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "AP@[0.05:0.50] {}  AP@0.50 {}  AP small {}  AP medium {}",
                fmt(rep.ap.ap_mean),
                fmt(rep.ap.ap_at_050),
                fmt(rep.ap.ap_small),
                fmt(rep.ap.ap_medium)
            );
        }
        Command::Froc { gt, models, out, report: report_path, resamples, seed } => {
            let gt = read_coco(&gt)?;
            let mut entries = Vec::with_capacity(models.len());
            for m in &models {
                let (label, file) = m
                    .split_once('=')
                    .with_context(|| format!("--model expects label=path, got {m:?}"))?;
                let dets = read_detections(Path::new(file))?;
                entries.push(report::froc_entry(label, &gt, &dets, resamples, seed)?);
            }
            plot::plot_froc(&entries, &out)?;
            if let Some(p) = report_path {
                write_json(&entries, &p)?;
            }
            println!("FROC plot written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}

//! FROC figure with one bootstrap band per model.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::report::FrocEntry;

/// Searched in order when `HGDET_FONT` is unset.
const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let path = std::env::var_os("HGDET_FONT")
            .map(PathBuf::from)
            .or_else(|| FONT_CANDIDATES.iter().map(PathBuf::from).find(|p| p.exists()))
            .ok_or("no TrueType font found; set HGDET_FONT to a .ttf file")?;
        let bytes = std::fs::read(&path).map_err(|e| format!("reading font {}: {e}", path.display()))?;
        // plotters keeps a 'static reference for the process lifetime
        register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice()))
            .map_err(|_| format!("{} is not a usable font", path.display()))
    })
    .clone()
    .map_err(|e| anyhow!(e))
}

pub fn legend_label(e: &FrocEntry) -> String {
    match e.ap_mean {
        Some(ap) => format!("{} (AP@[0.05:0.50] = {ap:.3})", e.label),
        None => format!("{} (AP@[0.05:0.50] = n/a)", e.label),
    }
}

/// Sensitivity against false positives per image, mean curve plus the 95% band.
pub fn plot_froc(entries: &[FrocEntry], path: &Path) -> Result<()> {
    if entries.is_empty() {
        bail!("nothing to plot");
    }
    ensure_font()?;

    let (width, height) = (900u32, 650u32);
    let mut pixels = vec![0u8; (width * height * 3) as usize];
    render(entries, &mut pixels, (width, height))?;
    let img = image::RgbImage::from_raw(width, height, pixels).context("plot buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn render(entries: &[FrocEntry], pixels: &mut [u8], size: (u32, u32)) -> Result<()> {
    let max_fppi = entries
        .iter()
        .flat_map(|e| e.band.upper_fppi.iter().chain(e.curve.points.iter().map(|p| &p.fppi)))
        .fold(0.0f64, |a, &b| a.max(b))
        .max(0.5)
        * 1.05;
    let root = BitMapBackend::with_buffer(pixels, size).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("FROC", ("sans-serif", 26))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..max_fppi, 0.0..1.02)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("false positives per image")
        .y_desc("sensitivity")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;

    for (i, e) in entries.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let b = &e.band;
        let lower: Vec<(f64, f64)> = (0..b.thresholds.len())
            .filter_map(|k| b.lower_sensitivity[k].map(|s| (b.mean_fppi[k], s)))
            .collect();
        let upper: Vec<(f64, f64)> = (0..b.thresholds.len())
            .filter_map(|k| b.upper_sensitivity[k].map(|s| (b.mean_fppi[k], s)))
            .collect();
        let mut polygon = lower.clone();
        polygon.extend(upper.iter().rev());
        if polygon.len() >= 3 {
            chart
                .draw_series(std::iter::once(Polygon::new(polygon, color.mix(0.18).filled())))
                .map_err(|e| anyhow!("{e}"))?;
        }
        let curve: Vec<(f64, f64)> = e.curve.points.iter().filter_map(|p| p.sensitivity.map(|s| (p.fppi, s))).collect();
        chart
            .draw_series(LineSeries::new(curve.clone(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(legend_label(e))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(curve.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .label_font(("sans-serif", 16))
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))
}

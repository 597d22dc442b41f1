//! PNG figures: loss curves, ablation bars and front overlays.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use frontnet_core::data::Raster;
use frontnet_core::eval::FrontSet;
use frontnet_core::train::{AblationArm, EpochLog};
use plotters::prelude::*;

use crate::io::write_rgb_png;

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a system TrueType font as `sans-serif` once; false when none
/// is available, in which case figures are drawn without text.
fn fonts_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

fn err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Loss components per epoch.
pub fn loss_curves(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let text = fonts_ready();
    let root = BitMapBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let series: [(&str, fn(&EpochLog) -> f64, RGBColor); 4] = [
        ("L_t", |e| e.l_t, BLUE),
        ("L_c", |e| e.l_c, GREEN),
        ("L_aux", |e| e.aux, MAGENTA),
        ("total", |e| e.total, BLACK),
    ];
    let ymax = epochs
        .iter()
        .flat_map(|e| series.iter().map(move |s| (s.1)(e)))
        .filter(|v| v.is_finite())
        .fold(1e-6, f64::max);
    let xmax = epochs.len().max(2) as f64 - 1.0;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20).x_label_area_size(40).y_label_area_size(60);
    if text {
        builder.caption("training loss per epoch", ("sans-serif", 22));
    }
    let mut chart = builder.build_cartesian_2d(0.0..xmax, 0.0..ymax * 1.05).map_err(err)?;
    if text {
        chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(err)?;
    }
    for (name, f, color) in series {
        let pts: Vec<(f64, f64)> = epochs.iter().map(|e| (e.epoch as f64, f(e))).collect();
        let drawn = chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(err)?;
        if text {
            drawn.label(name).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}

/// Mean macro IoU per arm with ±1 std whiskers.
pub fn ablation_bars(path: &Path, arms: &[AblationArm]) -> Result<()> {
    let text = fonts_ready();
    let root = BitMapBackend::new(path, (160 + 110 * arms.len() as u32, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let n = arms.len().max(1);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20).x_label_area_size(60).y_label_area_size(60);
    if text {
        builder.caption("macro IoU per ablation arm", ("sans-serif", 22));
    }
    let mut chart = builder.build_cartesian_2d(0.0..n as f64, 0.0..100.0).map_err(err)?;
    if text {
        let labels: Vec<String> = arms.iter().map(AblationArm::label).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n * 2 + 1)
            .x_label_formatter(&|x| {
                let i = (*x - 0.5).round();
                if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                    labels[i as usize].clone()
                } else {
                    String::new()
                }
            })
            .y_desc("IoU [%]")
            .draw()
            .map_err(err)?;
    }
    for (i, a) in arms.iter().enumerate() {
        let (m, s) = a.stats()[0];
        let x = i as f64;
        chart
            .draw_series([Rectangle::new([(x + 0.2, 0.0), (x + 0.8, 100.0 * m)], BLUE.mix(0.6).filled())])
            .map_err(err)?;
        let (lo, hi) = (100.0 * (m - s), 100.0 * (m + s));
        chart
            .draw_series([PathElement::new(vec![(x + 0.5, lo), (x + 0.5, hi)], BLACK.stroke_width(2))])
            .map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}

/// Scene raster in gray with the ground-truth front in green, the predicted
/// front in red and shared pixels in yellow.
pub fn front_overlay(path: &Path, image: &Raster<u8>, gt: &FrontSet, pred: &FrontSet) -> Result<()> {
    let mut rgb: Vec<u8> = image.data.iter().flat_map(|&v| [v / 2, v / 2, v / 2]).collect();
    let w = image.width;
    let mut paint = |front: &FrontSet, ch: usize| {
        for &(r, c) in &front.pixels {
            let i = 3 * (r * w + c);
            rgb[i + ch] = 255;
        }
    };
    paint(gt, 1);
    paint(pred, 0);
    write_rgb_png(path, image.width, image.height, rgb)
}

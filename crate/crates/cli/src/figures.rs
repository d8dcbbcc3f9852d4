//! Static PNG output: evaluation panels and loss curves.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use image::{imageops, Rgba, RgbaImage};
use plotters::prelude::*;
use stegattack::image::{to_dynamic, ImageBatch};

const GAP: u32 = 2;

/// One panel per `row_width` tuples; each row shows secret | decoded | transferred.
pub fn write_panels(
    dir: &Path,
    triples: &[[ImageBatch; 3]],
    row_width: usize,
) -> Result<Vec<PathBuf>> {
    if row_width == 0 {
        bail!("evaluate.panel_row_width must be at least 1");
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (p, chunk) in triples.chunks(row_width).enumerate() {
        let side = chunk[0][0].size() as u32;
        let width = 3 * side + 4 * GAP;
        let height = chunk.len() as u32 * (side + GAP) + GAP;
        let mut canvas = RgbaImage::from_pixel(width, height, Rgba([255, 255, 255, 255]));
        for (r, triple) in chunk.iter().enumerate() {
            for (c, img) in triple.iter().enumerate() {
                let tile = to_dynamic(&img.rgb(), 0).to_rgba8();
                let x = GAP + c as u32 * (side + GAP);
                let y = GAP + r as u32 * (side + GAP);
                imageops::overlay(&mut canvas, &tile, x as i64, y as i64);
            }
        }
        let path = dir.join(format!("panel_{p:03}.png"));
        canvas
            .save_with_format(&path, image::ImageFormat::Png)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

/// Draws unlabeled curves on shared axes (labels need a font backend, which
/// is not compiled in). Non-finite points are dropped.
pub fn line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let (w, h) = (640u32, 400u32);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flatten()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        bail!("nothing to plot for {}", path.display());
    }
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(12)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| anyhow!("{e}"))?;
        chart
            .plotting_area()
            .draw(&Rectangle::new([(x0, y0), (x1, y1)], BLACK.stroke_width(1)))
            .map_err(|e| anyhow!("{e}"))?;
        for (i, s) in series.iter().enumerate() {
            let line = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite());
            chart
                .draw_series(LineSeries::new(line, PALETTE[i % PALETTE.len()].stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?;
        }
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    let img = image::RgbImage::from_raw(w, h, buf).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

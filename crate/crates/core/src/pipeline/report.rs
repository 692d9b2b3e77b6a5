//! Figures for a finished run: metric-improvement bars and loss curves.
//! Plain raster output, no text rendering; the numbers behind each figure
//! are written next to it as CSV.

use super::eval::{read_csv, write_csv, EvalRow};
use super::run::RunDir;
use super::train::LogRow;
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Relative improvement of the refined row over the coarse row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: &'static str,
    pub coarse: f64,
    pub refined: f64,
    /// Positive means better; for MAE lower is better.
    pub relative_gain: f64,
}

pub fn metric_deltas(coarse: &EvalRow, refined: &EvalRow) -> Vec<MetricDelta> {
    let rel = |c: f64, r: f64, lower_better: bool| {
        let d = if lower_better { c - r } else { r - c };
        if c.abs() > 0.0 {
            d / c.abs()
        } else {
            0.0
        }
    };
    vec![
        MetricDelta { metric: "mae", coarse: coarse.mae, refined: refined.mae, relative_gain: rel(coarse.mae, refined.mae, true) },
        MetricDelta {
            metric: "f_beta_w",
            coarse: coarse.f_beta_w,
            refined: refined.f_beta_w,
            relative_gain: rel(coarse.f_beta_w, refined.f_beta_w, false),
        },
        MetricDelta { metric: "e_phi", coarse: coarse.e_phi, refined: refined.e_phi, relative_gain: rel(coarse.e_phi, refined.e_phi, false) },
        MetricDelta {
            metric: "s_alpha",
            coarse: coarse.s_alpha,
            refined: refined.s_alpha,
            relative_gain: rel(coarse.s_alpha, refined.s_alpha, false),
        },
    ]
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.min(y1).max(0)..=y0.max(y1).min(h - 1) {
        for x in x0.min(x1).max(0)..=x0.max(x1).min(w - 1) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Bars of relative gain per metric around a zero axis (green up, red down).
pub fn draw_delta_chart(deltas: &[MetricDelta]) -> RgbImage {
    let (w, h) = (80 * deltas.len().max(1) as u32 + 40, 240u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let mid = h as i64 / 2;
    let scale = deltas.iter().map(|d| d.relative_gain.abs()).fold(1e-9, f64::max);
    for (i, d) in deltas.iter().enumerate() {
        let x0 = 30 + 80 * i as i64;
        let len = (d.relative_gain / scale * (mid as f64 - 20.0)).round() as i64;
        let color = if d.relative_gain >= 0.0 { [44, 160, 44] } else { [214, 39, 40] };
        fill_rect(&mut img, x0, mid, x0 + 50, mid - len, color);
    }
    line(&mut img, (10, mid), (w as i64 - 10, mid), [0, 0, 0]);
    img
}

/// One polyline per component, each scaled to its own range.
pub fn draw_curves(series: &BTreeMap<String, Vec<f64>>) -> RgbImage {
    let (w, h) = (640u32, 320u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pad, pw, ph) = (20i64, w as i64 - 40, h as i64 - 40);
    fill_rect(&mut img, pad, pad + ph, pad + pw, pad + ph, [0, 0, 0]);
    fill_rect(&mut img, pad, pad, pad, pad + ph, [0, 0, 0]);
    for (k, values) in series.values().enumerate() {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < 2 {
            continue;
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let n = finite.len() - 1;
        let pt = |i: usize, v: f64| {
            (pad + (i as f64 / n as f64 * pw as f64).round() as i64, pad + ph - ((v - lo) / span * ph as f64).round() as i64)
        };
        for i in 0..n {
            line(&mut img, pt(i, finite[i]), pt(i + 1, finite[i + 1]), PALETTE[k % PALETTE.len()]);
        }
    }
    img
}

/// Writes `figures/metric_gains.{png,csv}` and `figures/loss_stage<k>.{png,csv}`.
pub fn report_run(run: &RunDir) -> Result<Vec<PathBuf>> {
    let figures = run.figures();
    std::fs::create_dir_all(&figures)?;
    let mut written = Vec::new();
    let save = |img: RgbImage, path: PathBuf| -> Result<PathBuf> {
        img.save_with_format(&path, image::ImageFormat::Png)?;
        Ok(path)
    };

    if run.eval().exists() {
        let rows: Vec<EvalRow> = read_csv(&run.eval())?;
        let coarse = rows.iter().find(|r| !r.refined);
        let refined = rows.iter().find(|r| r.refined);
        if let (Some(c), Some(r)) = (coarse, refined) {
            let deltas = metric_deltas(c, r);
            write_csv(&figures.join("metric_gains.csv"), &deltas)?;
            written.push(save(draw_delta_chart(&deltas), figures.join("metric_gains.png"))?);
        }
    }

    if run.logs().exists() {
        let logs: Vec<LogRow> = read_csv(&run.logs())?;
        let mut stages: BTreeMap<u8, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for r in &logs {
            stages.entry(r.stage).or_default().entry(r.component.clone()).or_default().push(r.value);
        }
        for (stage, series) in &stages {
            #[derive(Serialize)]
            struct Legend<'a> {
                color_index: usize,
                component: &'a str,
                points: usize,
            }
            let legend: Vec<Legend> = series
                .iter()
                .enumerate()
                .map(|(i, (name, v))| Legend { color_index: i % PALETTE.len(), component: name, points: v.len() })
                .collect();
            write_csv(&figures.join(format!("loss_stage{stage}.csv")), &legend)?;
            written.push(save(draw_curves(series), figures.join(format!("loss_stage{stage}.png")))?);
        }
    }
    if written.is_empty() {
        return Err(Error::InvalidArgument(format!("nothing to report in {}: no eval.csv or logs.csv", run.root().display())));
    }
    Ok(written)
}

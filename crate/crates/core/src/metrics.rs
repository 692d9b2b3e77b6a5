//! Evaluation measures for comparing coarse and refined masks against a
//! binary ground truth: MAE, weighted F-measure, adaptive E-measure and
//! S-measure. Degenerate ground truths (empty or full) follow the fallback
//! branches of the reference toolkits.

use crate::error::Result;
use crate::grid::{BinaryMap, ProbMap};
use serde::{Deserialize, Serialize};

/// `np.spacing(1)`, the epsilon the reference implementations use.
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub mae: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
    pub sample_count: usize,
}

impl MetricRow {
    /// All four measures for a single prediction.
    pub fn of(pred: &ProbMap, gt: &BinaryMap) -> Result<Self> {
        Ok(Self {
            mae: mae(pred, gt)?,
            f_beta_w: weighted_fmeasure(pred, gt)?,
            e_phi: adaptive_emeasure(pred, gt)?,
            s_alpha: smeasure(pred, gt, 0.5)?,
            sample_count: 1,
        })
    }

    /// Sample-weighted mean of several rows.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n: usize = rows.iter().map(|r| r.sample_count).sum();
        if n == 0 {
            return MetricRow::default();
        }
        let w = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r) * r.sample_count as f64).sum::<f64>() / n as f64;
        MetricRow {
            mae: w(|r| r.mae),
            f_beta_w: w(|r| r.f_beta_w),
            e_phi: w(|r| r.e_phi),
            s_alpha: w(|r| r.s_alpha),
            sample_count: n,
        }
    }
}

fn check(pred: &ProbMap, gt: &BinaryMap) -> Result<()> {
    pred.grid().check_same(gt.grid())
}

/// Mean absolute error.
pub fn mae(pred: &ProbMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.as_slice().len().max(1) as f64;
    Ok(pred.as_slice().iter().zip(gt.as_slice()).map(|(p, g)| (p - g).abs()).sum::<f64>() / n)
}

/// Normalized 7×7 Gaussian with σ = 5 (MATLAB `fspecial`).
fn gauss7() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// For every background pixel, the distance to the nearest foreground pixel
/// and the error value found there. Equidistant foreground pixels
/// contribute their mean error, which keeps the measure mirror-symmetric.
fn propagate_errors(gt: &BinaryMap, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = gt.shape();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for (r, row) in rows.iter_mut().enumerate() {
        for c in 0..w {
            if gt.is_set(r, c) {
                row.push(c);
            }
        }
    }
    let mut et = e.to_vec();
    let mut dist = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if gt.is_set(r, c) {
                continue;
            }
            let mut best = usize::MAX;
            let (mut sum, mut count) = (0.0, 0usize);
            for (fr, cols) in rows.iter().enumerate() {
                let dr2 = fr.abs_diff(r).pow(2);
                if cols.is_empty() || dr2 > best {
                    continue;
                }
                // Columns are sorted: the closest ones straddle c.
                let pos = cols.partition_point(|&fc| fc < c);
                for &fc in &cols[pos.saturating_sub(1)..(pos + 1).min(cols.len())] {
                    let d = dr2 + fc.abs_diff(c).pow(2);
                    if d < best {
                        best = d;
                        sum = 0.0;
                        count = 0;
                    }
                    if d == best {
                        sum += e[fr * w + fc];
                        count += 1;
                    }
                }
            }
            et[r * w + c] = sum / count as f64;
            dist[r * w + c] = (best as f64).sqrt();
        }
    }
    (et, dist)
}

/// Weighted F-measure with β² = 1. Empty ground truth scores 0.
pub fn weighted_fmeasure(pred: &ProbMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let (h, w) = gt.shape();
    if gt.count_ones() == 0 {
        return Ok(0.0);
    }
    let g = gt.as_slice();
    let e: Vec<f64> = pred.as_slice().iter().zip(g).map(|(p, g)| (p - g).abs()).collect();
    let (et, dist) = propagate_errors(gt, &e);
    let k = gauss7();
    let mut tp_w = 0.0;
    let mut fp_w = 0.0;
    let mut ew_fg = 0.0;
    let mut n_fg = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let mut ea = 0.0;
            // edge-replicating border
            for (i, krow) in k.iter().enumerate() {
                let rr = (r as isize + i as isize - 3).clamp(0, h as isize - 1) as usize;
                for (j, kv) in krow.iter().enumerate() {
                    let cc = (c as isize + j as isize - 3).clamp(0, w as isize - 1) as usize;
                    ea += kv * et[rr * w + cc];
                }
            }
            if g[p] == 1.0 {
                let m = if ea < e[p] { ea } else { e[p] };
                ew_fg += m;
                n_fg += 1.0;
            } else {
                let b = 2.0 - ((0.5f64).ln() / 5.0 * dist[p]).exp();
                fp_w += e[p] * b;
            }
        }
    }
    tp_w += n_fg - ew_fg;
    let recall = 1.0 - ew_fg / n_fg;
    let precision = tp_w / (tp_w + fp_w + EPS);
    Ok((2.0 * recall * precision / (recall + precision + EPS)).clamp(0.0, 1.0))
}

fn enhanced_alignment(a: f64, b: f64) -> f64 {
    let align = 2.0 * a * b / (a * a + b * b + EPS);
    (align + 1.0).powi(2) / 4.0
}

/// Adaptive E-measure: binarize at `min(2·mean(pred), 1)` and score the
/// enhanced alignment against the ground truth, normalized by the pixel
/// count.
pub fn adaptive_emeasure(pred: &ProbMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.as_slice().len();
    let thr = (2.0 * pred.mean()).min(1.0);
    let bin: Vec<bool> = pred.as_slice().iter().map(|&p| p >= thr).collect();
    let g: Vec<bool> = gt.as_slice().iter().map(|&v| v == 1.0).collect();
    let fg = g.iter().filter(|&&b| b).count();
    let total = if fg == 0 {
        bin.iter().filter(|&&b| !b).count() as f64
    } else if fg == n {
        bin.iter().filter(|&&b| b).count() as f64
    } else {
        let (mut ff, mut fb, mut bf, mut bb) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &t) in bin.iter().zip(&g) {
            match (p, t) {
                (true, true) => ff += 1,
                (true, false) => fb += 1,
                (false, true) => bf += 1,
                (false, false) => bb += 1,
            }
        }
        let mp = (ff + fb) as f64 / n as f64;
        let mg = fg as f64 / n as f64;
        let (pf, pb, gf, gb) = (1.0 - mp, -mp, 1.0 - mg, -mg);
        enhanced_alignment(pf, gf) * ff as f64
            + enhanced_alignment(pf, gb) * fb as f64
            + enhanced_alignment(pb, gf) * bf as f64
            + enhanced_alignment(pb, gb) * bb as f64
    };
    Ok((total / (n as f64 + EPS)).clamp(0.0, 1.0))
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pred: &ProbMap, gt: &BinaryMap) -> f64 {
    let u = gt.fraction();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        if g == 1.0 {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

fn ssim_block(pred: &ProbMap, gt: &BinaryMap, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            sx += pred.get(r, c);
            sy += gt.get(r, c);
        }
    }
    let (x, y) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            let (dx, dy) = (pred.get(r, c) - x, gt.get(r, c) - y);
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    }
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let alpha = 4.0 * x * y * cxy;
    let beta = (x * x + y * y) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        // both regions constant: only matching constants agree
        if (x - y).abs() < 1e-12 { 1.0 } else { 0.0 }
    } else {
        0.0
    }
}

fn region_score(pred: &ProbMap, gt: &BinaryMap) -> f64 {
    let (h, w) = gt.shape();
    let (mut sr, mut sc, mut cnt) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if gt.is_set(r, c) {
                sr += r as f64;
                sc += c as f64;
                cnt += 1.0;
            }
        }
    }
    let (cy, cx) = if cnt == 0.0 {
        (f64::round_ties_even(h as f64 / 2.0), f64::round_ties_even(w as f64 / 2.0))
    } else {
        (f64::round_ties_even(sr / cnt), f64::round_ties_even(sc / cnt))
    };
    // One-based split position, as in the reference implementation.
    let x = (cx as usize + 1).min(w);
    let y = (cy as usize + 1).min(h);
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * ssim_block(pred, gt, 0, y, 0, x)
        + w2 * ssim_block(pred, gt, 0, y, x, w)
        + w3 * ssim_block(pred, gt, y, h, 0, x)
        + w4 * ssim_block(pred, gt, y, h, x, w)
}

/// Structure measure `α·S_object + (1 − α)·S_region`. Empty ground truth
/// scores `1 − mean(pred)`, full ground truth scores `mean(pred)`.
pub fn smeasure(pred: &ProbMap, gt: &BinaryMap, alpha: f64) -> Result<f64> {
    check(pred, gt)?;
    let y = gt.fraction();
    let score = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        alpha * object_score(pred, gt) + (1.0 - alpha) * region_score(pred, gt)
    };
    Ok(score.clamp(0.0, 1.0))
}

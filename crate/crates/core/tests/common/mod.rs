#![allow(dead_code)]

pub mod diffusion;
pub mod grad;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umbd::{BinaryMap, ProbMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Ground truth with one or two random discs, never empty or full.
pub fn random_gt(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMap {
    loop {
        let blobs = rng.random_range(1..=2);
        let discs: Vec<(f64, f64, f64)> = (0..blobs)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(1.2..(h.min(w) as f64 / 2.5)),
                )
            })
            .collect();
        let g = BinaryMap::from_fn(h, w, |r, c| {
            discs.iter().any(|&(cr, cc, rad)| (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) < rad * rad)
        });
        let n = g.count_ones();
        if n > 0 && n < h * w {
            return g;
        }
    }
}

/// A soft prediction loosely correlated with `gt`.
pub fn random_pred(gt: &BinaryMap, rng: &mut ChaCha8Rng) -> ProbMap {
    let (h, w) = gt.shape();
    let data = gt
        .as_slice()
        .iter()
        .map(|&g| {
            let v: f64 = 0.6 * g + rng.random_range(0.0..0.4);
            if rng.random_bool(0.1) { 1.0 - v } else { v }
        })
        .collect();
    ProbMap::new(h, w, data).unwrap()
}

// ---------- straight-line metric oracles ----------

pub fn mae_oracle(p: &ProbMap, g: &BinaryMap) -> f64 {
    let (h, w) = g.shape();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            s += (p.get(r, c) - g.get(r, c)).abs();
        }
    }
    s / (h * w) as f64
}

pub fn wfm_oracle(p: &ProbMap, g: &BinaryMap) -> f64 {
    let (h, w) = g.shape();
    let fg: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| g.is_set(r, c)).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let err = |r: usize, c: usize| (p.get(r, c) - g.get(r, c)).abs();
    // nearest-foreground error (ties averaged) and distance
    let mut et = vec![vec![0.0; w]; h];
    let mut dst = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            if g.is_set(r, c) {
                et[r][c] = err(r, c);
                continue;
            }
            let d2 = |&(fr, fc): &(usize, usize)| (fr as f64 - r as f64).powi(2) + (fc as f64 - c as f64).powi(2);
            let best = fg.iter().map(d2).fold(f64::INFINITY, f64::min);
            let tied: Vec<f64> = fg.iter().filter(|q| d2(q) == best).map(|&(fr, fc)| err(fr, fc)).collect();
            et[r][c] = tied.iter().sum::<f64>() / tied.len() as f64;
            dst[r][c] = best.sqrt();
        }
    }
    // 7x7 gaussian, sigma 5, replicated border
    let mut k = [[0.0; 7]; 7];
    let mut ks = 0.0;
    for i in 0..7 {
        for j in 0..7 {
            let d = ((i as f64 - 3.0).powi(2) + (j as f64 - 3.0).powi(2)) / (2.0 * 25.0);
            k[i][j] = (-d).exp();
            ks += k[i][j];
        }
    }
    let mut sum_min_fg = 0.0;
    let mut fp = 0.0;
    let mut nfg = 0.0;
    for r in 0..h {
        for c in 0..w {
            let mut ea = 0.0;
            for i in 0..7 {
                for j in 0..7 {
                    let rr = (r as i64 + i as i64 - 3).max(0).min(h as i64 - 1) as usize;
                    let cc = (c as i64 + j as i64 - 3).max(0).min(w as i64 - 1) as usize;
                    ea += k[i][j] / ks * et[rr][cc];
                }
            }
            let e = err(r, c);
            if g.is_set(r, c) {
                sum_min_fg += ea.min(e);
                nfg += 1.0;
            } else {
                let b = 2.0 - (0.5f64.ln() / 5.0 * dst[r][c]).exp();
                fp += e * b;
            }
        }
    }
    let eps = f64::EPSILON;
    let tp = nfg - sum_min_fg;
    let recall = 1.0 - sum_min_fg / nfg;
    let precision = tp / (tp + fp + eps);
    (2.0 * precision * recall / (precision + recall + eps)).max(0.0)
}

pub fn emeasure_oracle(p: &ProbMap, g: &BinaryMap) -> f64 {
    let (h, w) = g.shape();
    let n = (h * w) as f64;
    let eps = f64::EPSILON;
    let mean: f64 = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| p.get(r, c)).sum::<f64>() / n;
    let thr = f64::min(2.0 * mean, 1.0);
    let bin = |r: usize, c: usize| if p.get(r, c) >= thr { 1.0 } else { 0.0 };
    let fg = g.count_ones() as f64;
    let mut total = 0.0;
    if fg == 0.0 {
        for r in 0..h {
            for c in 0..w {
                total += 1.0 - bin(r, c);
            }
        }
    } else if fg == n {
        for r in 0..h {
            for c in 0..w {
                total += bin(r, c);
            }
        }
    } else {
        let mut mb = 0.0;
        for r in 0..h {
            for c in 0..w {
                mb += bin(r, c);
            }
        }
        mb /= n;
        let mg = fg / n;
        for r in 0..h {
            for c in 0..w {
                let a = bin(r, c) - mb;
                let b = g.get(r, c) - mg;
                let align = 2.0 * a * b / (a * a + b * b + eps);
                total += (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
    }
    total / (n + eps)
}

fn ssim_oracle(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    if p.is_empty() {
        return 0.0;
    }
    let eps = f64::EPSILON;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let sx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + eps)
    } else if beta == 0.0 && (x - y).abs() < 1e-12 {
        1.0
    } else {
        0.0
    }
}

fn object_part(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let x = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|a| (a - x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    2.0 * x / (x * x + 1.0 + sd + f64::EPSILON)
}

pub fn smeasure_oracle(p: &ProbMap, g: &BinaryMap) -> f64 {
    let (h, w) = g.shape();
    let n = (h * w) as f64;
    let fgc = g.count_ones() as f64;
    let mean_p = p.as_slice().iter().sum::<f64>() / n;
    if fgc == 0.0 {
        return (1.0 - mean_p).max(0.0);
    }
    if fgc == n {
        return mean_p.max(0.0);
    }
    let u = fgc / n;
    let mut fgv = vec![];
    let mut bgv = vec![];
    let (mut sr, mut sc) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if g.is_set(r, c) {
                fgv.push(p.get(r, c));
                sr += r as f64;
                sc += c as f64;
            } else {
                bgv.push(1.0 - p.get(r, c));
            }
        }
    }
    let object = u * object_part(&fgv) + (1.0 - u) * object_part(&bgv);
    let y = ((sr / fgc).round_ties_even() as usize + 1).min(h);
    let x = ((sc / fgc).round_ties_even() as usize + 1).min(w);
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut a = vec![];
        let mut b = vec![];
        for r in r0..r1 {
            for c in c0..c1 {
                a.push(p.get(r, c));
                b.push(g.get(r, c));
            }
        }
        (ssim_oracle(&a, &b), ((r1 - r0) * (c1 - c0)) as f64 / n)
    };
    let parts = [block(0, y, 0, x), block(0, y, x, w), block(y, h, 0, x), block(y, h, x, w)];
    let region: f64 = parts.iter().map(|(s, wt)| s * wt).sum();
    (0.5 * object + 0.5 * region).max(0.0)
}

// ---------- finite-difference gradient check ----------

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central differences on randomly chosen entries of `vars` against the
/// autodiff gradient of `f`. Entries whose analytic and numeric gradients
/// are both below `floor` are skipped. Returns once `want` entries have
/// been compared or the candidates are exhausted.
pub fn gradcheck(
    vars: &[(String, Var)],
    f: &mut dyn FnMut() -> umbd::Result<Tensor>,
    want: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> GradReport {
    let loss = f().unwrap();
    let grads = loss.backward().unwrap();
    let mut r = rng(seed);
    let mut candidates: Vec<(usize, usize)> = vec![];
    let per_var = (2 * want).div_ceil(vars.len().max(1)).max(3);
    for (vi, (_, v)) in vars.iter().enumerate() {
        let n = v.elem_count();
        // spread over every tensor so each gets coverage
        for idx in rand::seq::index::sample(&mut r, n, per_var.min(n)) {
            candidates.push((vi, idx));
        }
    }
    // shuffle
    for i in (1..candidates.len()).rev() {
        let j = r.random_range(0..=i);
        candidates.swap(i, j);
    }
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (vi, idx) in candidates {
        if checked >= want {
            break;
        }
        let (name, v) = &vars[vi];
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[idx],
            None => 0.0,
        };
        let orig = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval_at = |x: f64, f: &mut dyn FnMut() -> umbd::Result<Tensor>| {
            let mut d = orig.clone();
            d[idx] = x;
            v.set(&Tensor::from_vec(d, v.shape(), v.device()).unwrap()).unwrap();
            f().unwrap().to_scalar::<f64>().unwrap()
        };
        let up = eval_at(orig[idx] + h, f);
        let down = eval_at(orig[idx] - h, f);
        v.set(&Tensor::from_vec(orig.clone(), v.shape(), v.device()).unwrap()).unwrap();
        let numeric = (up - down) / (2.0 * h);
        if analytic.abs() < floor && numeric.abs() < floor {
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e}");
        }
        checked += 1;
    }
    GradReport { checked, max_rel, worst }
}

/// Replace every trainable value with small random noise so no gradient is
/// structurally zero (zero-initialized output layers, unit norms).
pub fn jitter(vars: &[(String, Var)], scale: f64, seed: u64) {
    let mut r = rng(seed);
    for (_, v) in vars {
        let vals = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let d: Vec<f64> = vals.iter().map(|x| x + r.random_range(-scale..scale)).collect();
        v.set(&Tensor::from_vec(d, v.shape(), v.device()).unwrap()).unwrap();
    }
}

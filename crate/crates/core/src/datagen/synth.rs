//! Procedural camouflage scenes: a textured background with one or two
//! smooth blobs filled with a slightly shifted version of the same texture.

use crate::error::Result;
use crate::grid::{BinaryMap, Grid, Image};
use crate::rng::{rng_for, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub octaves: usize,
    /// Cell size of the coarsest noise octave, in pixels.
    pub base_cell: f64,
    pub amplitude: f64,
    /// Mean-colour shift of the foreground at strength 1.
    pub color_offset: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { octaves: 3, base_cell: 16.0, amplitude: 0.18, color_offset: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: String,
    pub image: Image,
    pub mask: BinaryMap,
}

pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.6;

/// Smooth value noise in roughly `[-1, 1]`.
fn value_noise(rng: &mut Rng, h: usize, w: usize, params: &TextureParams) -> Grid {
    let mut out = Grid::filled(h, w, 0.0);
    let mut cell = params.base_cell.max(1.0);
    let mut amp = 1.0;
    let mut total = 0.0;
    for _ in 0..params.octaves.max(1) {
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (or, oc) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        for r in 0..h {
            for c in 0..w {
                let y = r as f64 / cell + or;
                let x = c as f64 / cell + oc;
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                let (sy, sx) = (fy * fy * (3.0 - 2.0 * fy), fx * fx * (3.0 - 2.0 * fx));
                let at = |i: usize, j: usize| lattice[i.min(gh - 1) * gw + j.min(gw - 1)];
                let top = at(y0, x0) * (1.0 - sx) + at(y0, x0 + 1) * sx;
                let bot = at(y0 + 1, x0) * (1.0 - sx) + at(y0 + 1, x0 + 1) * sx;
                let v = out.get(r, c) + amp * (top * (1.0 - sy) + bot * sy);
                out.set(r, c, v);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    out.map(|v| v / total)
}

struct Blob {
    center: (f64, f64),
    radius: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn random(rng: &mut Rng, size: usize) -> Self {
        let s = size as f64;
        let radius = rng.random_range(0.12..0.3) * s;
        let center = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
        let harmonics = (0..3).map(|k| (rng.random_range(0.0..0.25) / (k as f64 + 1.0), rng.random_range(0.0..std::f64::consts::TAU))).collect();
        Self { center, radius, harmonics }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let theta = dy.atan2(dx);
        let scale: f64 = 1.0 + self.harmonics.iter().enumerate().map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).cos()).sum::<f64>();
        (dy * dy + dx * dx).sqrt() <= self.radius * scale
    }
}

/// Anti-aliased coverage of the union of blobs, 4×4 supersampling.
fn coverage(blobs: &[Blob], size: usize) -> Grid {
    let n = 4;
    Grid::from_fn(size, size, |r, c| {
        let mut hit = 0;
        for i in 0..n {
            for j in 0..n {
                let y = r as f64 + (i as f64 + 0.5) / n as f64 - 0.5;
                let x = c as f64 + (j as f64 + 0.5) / n as f64 - 0.5;
                if blobs.iter().any(|b| b.contains(y, x)) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (n * n) as f64
    })
}

/// Quantizes to the 8-bit grid so that PNG round trips are exact.
pub fn quantize(v: f64) -> f32 {
    dequantize((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// One scene from `seed`. Lower `strength` means a smaller foreground colour
/// shift, i.e. harder camouflage.
pub fn generate_camo_sample(seed: u64, size: usize, strength: f64, params: &TextureParams, id: &str) -> Result<DatasetSample> {
    if size < 8 {
        return Err(crate::Error::InvalidArgument(format!("image size must be at least 8, got {size}")));
    }
    let mut attempt = 0;
    let (cov, mask) = loop {
        let mut rng = rng_for(seed, "blobs", attempt);
        let count = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(&mut rng, size)).collect();
        let cov = coverage(&blobs, size);
        let mask = BinaryMap::threshold(&cov, 0.5 - 1e-9);
        let f = mask.fraction();
        if (MIN_AREA..=MAX_AREA).contains(&f) {
            break (cov, mask);
        }
        attempt += 1;
    };

    let mut rng = rng_for(seed, "texture", 0);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let shift = sign * strength * params.color_offset;
    let fg_params = TextureParams { base_cell: params.base_cell * (1.0 - 0.3 * strength).max(0.25), ..params.clone() };
    let mut data = Vec::with_capacity(3 * size * size);
    let mut bg_noise = Vec::new();
    let mut fg_noise = Vec::new();
    for _ in 0..3 {
        bg_noise.push(value_noise(&mut rng, size, size, params));
        fg_noise.push(value_noise(&mut rng, size, size, &fg_params));
    }
    for ch in 0..3 {
        for r in 0..size {
            for c in 0..size {
                let bg = base[ch] + params.amplitude * bg_noise[ch].get(r, c);
                let fg = base[ch] + shift + params.amplitude * fg_noise[ch].get(r, c);
                let a = cov.get(r, c);
                data.push(quantize(a * fg + (1.0 - a) * bg));
            }
        }
    }
    Ok(DatasetSample { id: id.to_string(), image: Image::new(size, size, data)?, mask })
}

//! Frozen prior segmenters that supply the coarse mask and a feature
//! pyramid, plus the ground-truth uncertainty target.

use crate::error::{Error, Result};
use crate::grid::{stack_images, stack_maps, BinaryMap, Grid, Image, ProbMap, UncertaintyMap};
use crate::nn::encoder::{Encoder, EncoderConfig};
use crate::nn::layers::{upsample_to, Conv2d};
use crate::nn::params::ParamStore;
use crate::nn::FeaturePyramid;
use crate::rng::{rng_for, Rng};
use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// `|M_c − M_GT|` per pixel.
pub fn uncertainty_gt(coarse: &ProbMap, gt: &BinaryMap) -> Result<UncertaintyMap> {
    let g = coarse.grid().zip_map(gt.grid(), |a, b| (a - b).abs())?;
    Ok(UncertaintyMap::from_grid(g))
}

/// Output of a prior segmenter on a batch.
#[derive(Debug, Clone)]
pub struct PriorOutput {
    /// `[B, 1, H, W]` coarse masks.
    pub coarse: Tensor,
    pub features: FeaturePyramid,
}

/// A frozen segmenter `x ↦ (M_c, features)`.
pub trait PriorSegmenter: Send + Sync {
    fn kind(&self) -> &'static str;

    fn feature_channels(&self) -> [usize; 4];

    fn coarse_mask(&self, image: &Image) -> Result<ProbMap>;

    /// Feature pyramid for images whose coarse masks are already known.
    fn features(&self, images: &[&Image], coarse: &Tensor) -> Result<FeaturePyramid>;

    /// Checksum of everything that determines the segmenter's outputs.
    fn checksum(&self) -> Result<u64>;

    fn segment(&self, images: &[&Image]) -> Result<PriorOutput> {
        let masks = images.iter().map(|im| self.coarse_mask(im)).collect::<Result<Vec<_>>>()?;
        let coarse = stack_maps(masks.iter().map(|m| m.grid()), DType::F32, &Device::Cpu)?;
        let features = self.features(images, &coarse)?;
        Ok(PriorOutput { coarse, features })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Copy> Range<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }
}

impl Range<f64> {
    fn draw(&self, rng: &mut Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

impl Range<u32> {
    fn draw(&self, rng: &mut Rng) -> u32 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// How a ground-truth mask is degraded into a coarse prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Radius of the dilation or erosion (sign chosen at random).
    pub morph_radius: Range<u32>,
    /// Standard deviation of the Gaussian blur in pixels.
    pub blur_sigma: Range<f64>,
    pub false_blobs: Range<u32>,
    pub drop_blobs: Range<u32>,
    pub blob_radius: Range<f64>,
    /// Mix between the hard perturbed mask (0) and its blurred version (1).
    pub softness: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            morph_radius: Range::new(0, 1),
            blur_sigma: Range::new(1.5, 2.5),
            false_blobs: Range::new(0, 1),
            drop_blobs: Range::new(0, 1),
            blob_radius: Range::new(2.0, 3.5),
            softness: 1.0,
        }
    }
}

impl CorruptionSpec {
    /// No degradation: the coarse mask equals the ground truth.
    pub fn none() -> Self {
        Self {
            morph_radius: Range::new(0, 0),
            blur_sigma: Range::new(0.0, 0.0),
            false_blobs: Range::new(0, 0),
            drop_blobs: Range::new(0, 0),
            blob_radius: Range::new(0.0, 0.0),
            softness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_f = |r: &Range<f64>| r.lo >= 0.0 && r.hi >= r.lo && r.hi.is_finite();
        let ok_u = |r: &Range<u32>| r.hi >= r.lo;
        if !(ok_u(&self.morph_radius) && ok_u(&self.false_blobs) && ok_u(&self.drop_blobs))
            || !(ok_f(&self.blur_sigma) && ok_f(&self.blob_radius))
            || !(0.0..=1.0).contains(&self.softness)
        {
            return Err(Error::Config(format!("invalid corruption spec {self:?}")));
        }
        Ok(())
    }
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.ceil() as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if ((dr * dr + dc * dc) as f64) <= radius * radius {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Dilation (`grow`) or erosion of a binary grid by a disk.
pub fn morph(mask: &Grid, radius: u32, grow: bool) -> Grid {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    let offs = disk_offsets(radius as f64);
    let target = if grow { 1.0 } else { 0.0 };
    Grid::from_fn(h, w, |r, c| {
        let hit = offs.iter().any(|&(dr, dc)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            // Outside the image counts as background.
            let v = if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize { 0.0 } else { mask.get(rr as usize, cc as usize) };
            v == target
        });
        if hit {
            target
        } else {
            1.0 - target
        }
    })
}

/// Separable Gaussian blur with edge replication, kernel truncated at 3σ.
pub fn gaussian_blur(g: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return g.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let (h, w) = g.shape();
    let pass = |src: &Grid, horizontal: bool| {
        Grid::from_fn(h, w, |row, col| {
            k.iter()
                .enumerate()
                .map(|(j, kv)| {
                    let d = j as isize - r;
                    let (rr, cc) = if horizontal {
                        (row as isize, (col as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((row as isize + d).clamp(0, h as isize - 1), col as isize)
                    };
                    kv * src.get(rr as usize, cc as usize)
                })
                .sum()
        })
    };
    pass(&pass(g, true), false)
}

fn stamp(g: &mut Grid, center: (f64, f64), radius: f64, value: f64) {
    let (h, w) = g.shape();
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
            if dr * dr + dc * dc <= radius * radius {
                g.set(r, c, value);
            }
        }
    }
}

/// Degrades a ground-truth mask: morphological shift, spurious and missing
/// blobs, then blur.
pub fn corrupt_mask(gt: &BinaryMap, spec: &CorruptionSpec, rng: &mut Rng) -> Result<ProbMap> {
    spec.validate()?;
    let (h, w) = gt.shape();
    let radius = spec.morph_radius.draw(rng);
    let grow = rng.random::<bool>();
    let mut hard = morph(gt.grid(), radius, grow);
    for _ in 0..spec.false_blobs.draw(rng) {
        let center = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let br = spec.blob_radius.draw(rng);
        stamp(&mut hard, center, br, 1.0);
    }
    for _ in 0..spec.drop_blobs.draw(rng) {
        let fg: Vec<usize> = (0..h * w).filter(|&i| hard.as_slice()[i] > 0.5).collect();
        if fg.is_empty() {
            break;
        }
        let i = fg[rng.random_range(0..fg.len())];
        let br = spec.blob_radius.draw(rng);
        stamp(&mut hard, ((i / w) as f64, (i % w) as f64), br, 0.0);
    }
    let sigma = spec.blur_sigma.draw(rng);
    let blurred = gaussian_blur(&hard, sigma);
    let s = spec.softness;
    let mixed = hard.zip_map(&blurred, |a, b| (1.0 - s) * a + s * b)?;
    Ok(ProbMap::from_grid(mixed))
}

/// Default widths of the frozen prior encoders.
pub const PRIOR_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Segmenter that returns a degraded copy of the ground truth for every
/// registered image, with features from a frozen random encoder over the
/// image and its coarse mask.
pub struct CorruptedOracle {
    spec: CorruptionSpec,
    seed: u64,
    masks: HashMap<u64, ProbMap>,
    store: ParamStore,
    encoder: Encoder,
}

impl CorruptedOracle {
    pub fn new(spec: CorruptionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::new(rng_seed(seed, "prior-encoder"), DType::F32);
        let encoder = Encoder::new(&store.root().pp("encoder"), &EncoderConfig { in_channels: 4, channels: PRIOR_CHANNELS })?;
        Ok(Self { spec, seed, masks: HashMap::new(), store, encoder })
    }

    pub fn spec(&self) -> &CorruptionSpec {
        &self.spec
    }

    /// Registers an image; its coarse mask depends only on the seed and the
    /// image content.
    pub fn register(&mut self, image: &Image, gt: &BinaryMap) -> Result<ProbMap> {
        if image.shape() != gt.shape() {
            return Err(Error::shape(image.shape(), gt.shape()));
        }
        let key = image.fingerprint();
        let mut rng = rng_for(self.seed, "corrupt", key);
        let m = corrupt_mask(gt, &self.spec, &mut rng)?;
        self.masks.insert(key, m.clone());
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn rng_seed(seed: u64, label: &str) -> u64 {
    crate::rng::derive_seed(seed, label, 0)
}

impl PriorSegmenter for CorruptedOracle {
    fn kind(&self) -> &'static str {
        "corrupted-oracle"
    }

    fn feature_channels(&self) -> [usize; 4] {
        PRIOR_CHANNELS
    }

    fn coarse_mask(&self, image: &Image) -> Result<ProbMap> {
        self.masks
            .get(&image.fingerprint())
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("image is not registered with the corrupted-oracle prior".into()))
    }

    fn features(&self, images: &[&Image], coarse: &Tensor) -> Result<FeaturePyramid> {
        let x = stack_images(images.iter().copied(), DType::F32, &Device::Cpu)?;
        let input = Tensor::cat(&[x, coarse.to_dtype(DType::F32)?], 1)?;
        Ok(self.encoder.forward(&input)?.detach())
    }

    fn checksum(&self) -> Result<u64> {
        let mut h = self.store.checksum()?;
        let mut keys: Vec<_> = self.masks.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            h = crate::rng::mix64(h ^ k);
            for v in self.masks[&k].as_slice() {
                h = crate::rng::mix64(h ^ v.to_bits());
            }
        }
        Ok(h)
    }
}

/// Small encoder-decoder trained briefly with BCE and then frozen.
pub struct ToyCnnSegmenter {
    store: ParamStore,
    encoder: Encoder,
    reduce: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { epochs: 2, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

impl ToyCnnSegmenter {
    pub fn new(seed: u64) -> Result<Self> {
        Self::with_store(ParamStore::new(rng_seed(seed, "toy-cnn"), DType::F32))
    }

    fn with_store(store: ParamStore) -> Result<Self> {
        let s = store.root();
        let encoder = Encoder::new(&s.pp("encoder"), &EncoderConfig { in_channels: 3, channels: PRIOR_CHANNELS })?;
        let reduce = (0..4).map(|i| Conv2d::new(&s.pp(format!("reduce{i}")), PRIOR_CHANNELS[i], 8, 1, 1)).collect::<Result<_>>()?;
        let head = Conv2d::new(&s.pp("head"), 32, 1, 3, 1)?;
        Ok(Self { store, encoder, reduce, head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn logits(&self, x: &Tensor) -> Result<(Tensor, FeaturePyramid)> {
        let (_, _, h, w) = x.dims4()?;
        let feats = self.encoder.forward(x)?;
        let (_, _, h1, w1) = feats.level(0).dims4()?;
        let parts = (0..4)
            .map(|i| upsample_to(&self.reduce[i].forward(feats.level(i))?, h1, w1))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.head.forward(&Tensor::cat(&parts, 1)?)?;
        Ok((crate::nn::layers::resize_bilinear(&logits, h, w)?, feats))
    }

    /// Trains on `(image, mask)` pairs; the result is frozen.
    pub fn train(samples: &[(&Image, &BinaryMap)], cfg: &ToyTrainConfig) -> Result<Self> {
        use candle_nn::Optimizer;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("toy segmenter needs a nonempty training set".into()));
        }
        let net = Self::new(cfg.seed)?;
        let mut opt = candle_nn::AdamW::new(
            net.store.vars(&[]),
            candle_nn::ParamsAdamW { lr: cfg.learning_rate, weight_decay: 1e-4, ..Default::default() },
        )?;
        let mut rng = rng_for(cfg.seed, "toy-cnn-order", 0);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let x = stack_images(chunk.iter().map(|&i| samples[i].0), DType::F32, &Device::Cpu)?;
                let gt = stack_maps(chunk.iter().map(|&i| samples[i].1.grid()), DType::F32, &Device::Cpu)?;
                let (logits, _) = net.logits(&x)?;
                let loss = crate::losses::bce_with_logits(&logits, &gt)?;
                opt.backward_step(&loss)?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::pipeline::checkpoint::save(path, &self.store, "toy-cnn-prior", &serde_json::Value::Null)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let store = ParamStore::new(0, DType::F32);
        let net = Self::with_store(store)?;
        crate::pipeline::checkpoint::load_into(path, &net.store, "toy-cnn-prior")?;
        Ok(net)
    }
}

impl PriorSegmenter for ToyCnnSegmenter {
    fn kind(&self) -> &'static str {
        "toy-cnn"
    }

    fn feature_channels(&self) -> [usize; 4] {
        PRIOR_CHANNELS
    }

    fn coarse_mask(&self, image: &Image) -> Result<ProbMap> {
        let (logits, _) = self.logits(&image.to_tensor(DType::F32, &Device::Cpu)?)?;
        let p = candle_nn::ops::sigmoid(&logits)?;
        ProbMap::from_tensor(&p)
    }

    fn features(&self, images: &[&Image], _coarse: &Tensor) -> Result<FeaturePyramid> {
        let x = stack_images(images.iter().copied(), DType::F32, &Device::Cpu)?;
        Ok(self.encoder.forward(&x)?.detach())
    }

    fn checksum(&self) -> Result<u64> {
        self.store.checksum()
    }

    fn segment(&self, images: &[&Image]) -> Result<PriorOutput> {
        let x = stack_images(images.iter().copied(), DType::F32, &Device::Cpu)?;
        let (logits, feats) = self.logits(&x)?;
        Ok(PriorOutput { coarse: candle_nn::ops::sigmoid(&logits)?.detach(), features: feats.detach() })
    }
}

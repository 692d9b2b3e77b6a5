//! Conditional noise-prediction network: a small U-Net over
//! `[image, conditioning mask, latent]` with time conditioning and
//! prior-feature adaptation at each of the four pyramid levels.

use super::layers::{crop_to, upsample_to, Conv2d, GroupNorm, Linear, Mode, PRelu, TimeBias, TimeEmbedding};
use super::params::{Init, Scope};
use super::FeaturePyramid;
use crate::error::{Error, Result};
use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

/// Which coarse-mask channel is fed to the denoiser.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// `U ⊙ M_c`.
    #[default]
    Masked,
    /// Unmasked `M_c`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: [usize; 4],
    pub time_embedding_dim: usize,
    pub adapted_channels: usize,
    pub prior_channels: [usize; 4],
    pub timesteps: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
}

impl DenoiserConfig {
    /// Desk-scale defaults for a prior with the given level widths.
    pub fn desk(prior_channels: [usize; 4]) -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: [1, 2, 4, 4],
            time_embedding_dim: 128,
            adapted_channels: 64,
            prior_channels,
            timesteps: 1000,
            conditioning: Conditioning::Masked,
        }
    }

    /// Reduced widths for single-core CPU training.
    pub fn compact(prior_channels: [usize; 4]) -> Self {
        Self { base_channels: 16, time_embedding_dim: 64, adapted_channels: 32, ..Self::desk(prior_channels) }
    }

    pub fn level_channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.base_channels * self.channel_multipliers[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.adapted_channels == 0 || self.time_embedding_dim < 2 || self.timesteps == 0 {
            return Err(Error::Config("denoiser widths and timesteps must be positive".into()));
        }
        if self.channel_multipliers.contains(&0) || self.prior_channels.contains(&0) {
            return Err(Error::Config("channel multipliers and prior widths must be positive".into()));
        }
        Ok(())
    }
}

/// Time-conditioned residual block used along the denoiser's own path.
struct TimeResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: TimeBias,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(s: &Scope, c_in: usize, c_out: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&s.pp("norm1"), c_in)?,
            conv1: Conv2d::new(&s.pp("conv1"), c_in, c_out, 3, 1)?,
            time: TimeBias::new(&s.pp("time"), temb, c_out)?,
            norm2: GroupNorm::new(&s.pp("norm2"), c_out)?,
            conv2: Conv2d::new(&s.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out { None } else { Some(Conv2d::new(&s.pp("skip"), c_in, c_out, 1, 1)?) },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.time.forward(&h, temb)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Lifts prior features to the adapted width with a time-dependent affine
/// modulation `(1 + γ(t), β(t))`.
pub struct PriorResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    film: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    width: usize,
}

impl PriorResBlock {
    /// With `zero_out`, the modulation and output convolution start at zero so
    /// the block reduces to its skip path.
    pub fn new(s: &Scope, c_in: usize, c_out: usize, temb: usize, zero_out: bool) -> Result<Self> {
        let (film, conv2) = if zero_out {
            (Linear::zeros(&s.pp("film"), temb, 2 * c_out)?, Conv2d::zeros(&s.pp("conv2"), c_out, c_out, 3, 1)?)
        } else {
            (Linear::new(&s.pp("film"), temb, 2 * c_out)?, Conv2d::new(&s.pp("conv2"), c_out, c_out, 3, 1)?)
        };
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), c_in, c_out, 3, 1)?,
            norm1: GroupNorm::new(&s.pp("norm1"), c_out)?,
            film,
            norm2: GroupNorm::new(&s.pp("norm2"), c_out)?,
            conv2,
            skip: if c_in == c_out { None } else { Some(Conv2d::new(&s.pp("skip"), c_in, c_out, 1, 1)?) },
            width: c_out,
        })
    }

    /// Per-sample `(γ, β)`, each `[B, C′]`.
    pub fn gamma_beta(&self, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.film.forward(&temb.silu()?)?;
        Ok((gb.narrow(D::Minus1, 0, self.width)?, gb.narrow(D::Minus1, self.width, self.width)?))
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let (gamma, beta) = self.gamma_beta(temb)?;
        let shape = (b, self.width, 1, 1);
        let h = self.norm1.forward(&self.conv1.forward(x)?)?;
        let h = h.broadcast_mul(&(gamma.reshape(shape)? + 1.0)?)?.broadcast_add(&beta.reshape(shape)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Fuses denoiser features with lifted prior features at one level and maps
/// back to the denoiser width.
pub struct FeatureAdapter {
    lift: PriorResBlock,
    t_in: TimeBias,
    conv: Conv2d,
    t_mid: TimeBias,
    act: PRelu,
    t_out: TimeBias,
    proj: Conv2d,
}

impl FeatureAdapter {
    pub fn new(s: &Scope, own: usize, prior: usize, adapted: usize, temb: usize) -> Result<Self> {
        let cat = own + adapted;
        Ok(Self {
            lift: PriorResBlock::new(&s.pp("lift"), prior, adapted, temb, false)?,
            t_in: TimeBias::new(&s.pp("t_in"), temb, cat)?,
            conv: Conv2d::new(&s.pp("conv"), cat, cat, 3, 1)?,
            t_mid: TimeBias::new(&s.pp("t_mid"), temb, cat)?,
            act: PRelu::new(&s.pp("act"), cat)?,
            t_out: TimeBias::new(&s.pp("t_out"), temb, cat)?,
            proj: Conv2d::new(&s.pp("proj"), cat, own, 1, 1)?,
        })
    }

    pub fn forward(&self, own: &Tensor, prior: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let cat = Tensor::cat(&[own.clone(), self.lift.forward(prior, temb)?], 1)?;
        let h = (self.conv.forward(&self.t_in.forward(&cat, temb)?)? + &cat)?;
        let h = self.t_out.forward(&self.act.forward(&self.t_mid.forward(&h, temb)?)?, temb)?;
        self.proj.forward(&h)
    }
}

/// Initial bias of the output logit.
const OUT_BIAS: f64 = -3.0;

pub struct Denoiser {
    cfg: DenoiserConfig,
    time: TimeEmbedding,
    stem: Conv2d,
    half_down: Conv2d,
    half_block: TimeResBlock,
    downs: Vec<Conv2d>,
    blocks: Vec<TimeResBlock>,
    adapters: Vec<FeatureAdapter>,
    mid: TimeResBlock,
    up_convs: Vec<Conv2d>,
    up_blocks: Vec<TimeResBlock>,
    half_up: Conv2d,
    full_up: Conv2d,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl Denoiser {
    pub fn new(s: &Scope, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let c = cfg.level_channels();
        let td = cfg.time_embedding_dim;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut adapters = Vec::new();
        for i in 0..4 {
            let prev = if i == 0 { b } else { c[i - 1] };
            downs.push(Conv2d::new(&s.pp(format!("down{i}")), prev, c[i], 3, 2)?);
            blocks.push(TimeResBlock::new(&s.pp(format!("block{i}")), c[i], c[i], td)?);
            adapters.push(FeatureAdapter::new(&s.pp(format!("adapt{i}")), c[i], cfg.prior_channels[i], cfg.adapted_channels, td)?);
        }
        // The output logit scores y0 = 1, which is rare; start it low. Created
        // ahead of the layer so the layer picks up this value.
        s.pp("out").get("bias", &[1], Init::Const(OUT_BIAS))?;
        let mut up_convs = Vec::new();
        let mut up_blocks = Vec::new();
        for i in 0..3 {
            up_convs.push(Conv2d::new(&s.pp(format!("up{i}")), c[i + 1] + c[i], c[i], 3, 1)?);
            up_blocks.push(TimeResBlock::new(&s.pp(format!("up_block{i}")), c[i], c[i], td)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            time: TimeEmbedding::new(&s.pp("time"), 128, td)?,
            stem: Conv2d::new(&s.pp("stem"), 5, b, 3, 1)?,
            half_down: Conv2d::new(&s.pp("half_down"), b, b, 3, 2)?,
            half_block: TimeResBlock::new(&s.pp("half_block"), b, b, td)?,
            downs,
            blocks,
            adapters,
            mid: TimeResBlock::new(&s.pp("mid"), c[3], c[3], td)?,
            up_convs,
            up_blocks,
            half_up: Conv2d::new(&s.pp("half_up"), c[0] + b, b, 3, 1)?,
            full_up: Conv2d::new(&s.pp("full_up"), 2 * b, b, 3, 1)?,
            out_norm: GroupNorm::new(&s.pp("out_norm"), b)?,
            out: Conv2d::new(&s.pp("out"), b, 1, 1, 1)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Predicted Bernoulli noise `[B, 1, H, W]` in `[0, 1]`.
    ///
    /// `cond` is the conditioning mask channel and `ts` the per-sample steps.
    pub fn predict_noise(
        &self,
        x: &Tensor,
        cond: &Tensor,
        y_t: &Tensor,
        ts: &[usize],
        prior: &FeaturePyramid,
    ) -> Result<Tensor> {
        let (bsz, xc, h, w) = x.dims4()?;
        if xc != 3 {
            return Err(Error::dims("[B, 3, H, W] image", x.dims()));
        }
        for m in [cond, y_t] {
            if m.dims() != [bsz, 1, h, w] {
                return Err(Error::dims(format!("[{bsz}, 1, {h}, {w}]"), m.dims()));
            }
        }
        if ts.len() != bsz {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {bsz}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.cfg.timesteps) {
            return Err(Error::OutOfRange { what: "timestep", value: t, lo: 1, hi: self.cfg.timesteps });
        }
        prior.check_input(h, w)?;
        if prior.batch() != bsz || prior.channels() != self.cfg.prior_channels {
            return Err(Error::dims(
                format!("prior batch {bsz} with channels {:?}", self.cfg.prior_channels),
                (prior.batch(), prior.channels()),
            ));
        }

        let temb = self.time.forward(ts, x.dtype(), x.device())?;
        let input = Tensor::cat(&[x.clone(), cond.clone(), y_t.clone()], 1)?;
        let full = self.stem.forward(&input)?.silu()?;
        let half = self.half_block.forward(&self.half_down.forward(&full)?, &temb)?;

        let mut skips = Vec::with_capacity(4);
        let mut hcur = half.clone();
        for i in 0..4 {
            let g = self.blocks[i].forward(&self.downs[i].forward(&hcur)?, &temb)?;
            hcur = self.adapters[i].forward(&g, prior.level(i), &temb)?;
            skips.push(hcur.clone());
        }
        let mut d = self.mid.forward(&skips[3], &temb)?;
        for i in (0..3).rev() {
            let (_, _, sh, sw) = skips[i].dims4()?;
            let up = upsample_to(&d, sh, sw)?;
            let merged = self.up_convs[i].forward(&Tensor::cat(&[up, skips[i].clone()], 1)?)?;
            d = self.up_blocks[i].forward(&merged, &temb)?;
        }
        let (_, _, hh, hw) = half.dims4()?;
        let d = self.half_up.forward(&Tensor::cat(&[upsample_to(&d, hh, hw)?, half], 1)?)?.silu()?;
        let d = self.full_up.forward(&Tensor::cat(&[upsample_to(&d, h, w)?, full], 1)?)?;
        // The head predicts a logit for y0; for binary y_t, |y_t − σ(z)| equals
        // σ((1 − 2·y_t)·z), so the noise estimate stays a plain sigmoid.
        let logits = crop_to(&self.out.forward(&self.out_norm.forward(&d)?.silu()?)?, h, w)?;
        let sign = y_t.affine(-2.0, 1.0)?;
        Ok(candle_nn::ops::sigmoid(&(logits * sign)?)?)
    }

    /// Forward pass; the denoiser has no stochastic layers so `mode` only
    /// documents intent.
    pub fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        y_t: &Tensor,
        ts: &[usize],
        prior: &FeaturePyramid,
        _mode: &mut Mode,
    ) -> Result<Tensor> {
        self.predict_noise(x, cond, y_t, ts, prior)
    }
}

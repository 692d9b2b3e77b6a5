//! Hybrid uncertainty network: a shared encoder feeding a Gaussian latent
//! (BNN) head and a discriminative decoder whose features are suppressed by
//! an attention map built from the coarse mask, its entropy and the BNN
//! spread; the branches are fused with windowed cross attention.

use super::attention::{attention, attention_with_weights};
use super::encoder::{Encoder, EncoderConfig};
use super::layers::{
    crop_to, dropout, leaky_relu, resize_bilinear, softplus, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, RmsNorm,
};
use super::params::{Init, Scope};
use super::FeaturePyramid;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::UncertaintyMap;
use candle_core::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub window_size: usize,
    pub head_dim: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { window_size: 16, head_dim: 4, heads: 2 }
    }
}

impl FusionConfig {
    pub fn width(&self) -> usize {
        self.head_dim * self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuqNetConfig {
    pub backbone: [usize; 4],
    pub fusion_channels: usize,
    pub head_channels: usize,
    pub mc_samples: usize,
    pub dropout: f64,
    pub fusion: FusionConfig,
    /// Disable to run the decoder on unmodulated features.
    pub residual_attention: bool,
}

impl Default for HuqNetConfig {
    fn default() -> Self {
        Self {
            backbone: [32, 64, 128, 256],
            fusion_channels: 16,
            head_channels: 16,
            mc_samples: 10,
            dropout: 0.1,
            fusion: FusionConfig::default(),
            residual_attention: true,
        }
    }
}

impl HuqNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 2 {
            return Err(Error::Config(format!("mc_samples must be >= 2, got {}", self.mc_samples)));
        }
        if self.backbone.contains(&0) || self.fusion_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("HUQNet widths must be positive".into()));
        }
        if self.fusion.window_size == 0 || self.fusion.head_dim == 0 || self.fusion.heads == 0 {
            return Err(Error::Config("fusion window, head dim and head count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// All uncertainty maps from one forward pass, each `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct UncertaintyBundle {
    pub entropy: Tensor,
    pub bnn: Tensor,
    pub discriminative: Tensor,
    pub fused: Tensor,
    /// Latent mean and spread at the BNN head's resolution.
    pub mu: Tensor,
    pub sigma: Tensor,
    /// One retained latent draw (logits) at input resolution.
    pub sample_logits: Tensor,
    pub attention: Tensor,
}

impl UncertaintyBundle {
    pub fn fused_maps(&self) -> Result<Vec<UncertaintyMap>> {
        crate::grid::unstack_maps(&self.fused)?.into_iter().map(|g| Ok(UncertaintyMap::from_grid(g))).collect()
    }
}

/// Binary entropy in bits, `0·log 0 = 0`.
pub fn entropy_map(p: &Tensor) -> Result<Tensor> {
    let eps = 1e-12;
    let p = p.clamp(0.0, 1.0)?;
    let q = (1.0 - &p)?;
    let h = ((&p * p.clamp(eps, 1.0)?.log()?)? + (&q * q.clamp(eps, 1.0)?.log()?)?)?;
    Ok((h.neg()? / std::f64::consts::LN_2)?.clamp(0.0, 1.0)?)
}

/// Spread `max − mean` at or below which a map counts as constant.
const FLAT_SPREAD: f64 = 1e-6;

/// `clamp((v − mean) / (max − mean), 0, 1)` per sample; maps that are
/// constant up to [`FLAT_SPREAD`] normalize to 0 instead of amplifying
/// rounding noise.
pub fn mean_max_normalize(v: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = v.dims4()?;
    let flat = v.reshape((b, c * h * w))?;
    let mean = flat.mean_keepdim(1)?;
    let max = flat.max_keepdim(1)?;
    let spread = (max - &mean)?;
    let out = flat.broadcast_sub(&mean)?.broadcast_div(&spread.maximum(FLAT_SPREAD)?)?.clamp(0.0, 1.0)?;
    let varied = spread.gt(FLAT_SPREAD)?.broadcast_as(out.shape())?;
    Ok(varied.where_cond(&out, &out.zeros_like()?)?.reshape((b, c, h, w))?)
}

/// Latent `c = μ + ε·σ` head on the third backbone level.
pub struct BnnHead {
    mu: Conv2d,
    sigma: Conv2d,
}

pub struct BnnOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Per-pixel sample variance over the draws, head resolution.
    pub variance: Tensor,
    pub first_draw: Tensor,
}

impl BnnHead {
    pub fn new(s: &Scope, c_in: usize) -> Result<Self> {
        Ok(Self { mu: Conv2d::new(&s.pp("mu"), c_in, 1, 3, 1)?, sigma: Conv2d::new(&s.pp("sigma"), c_in, 1, 3, 1)? })
    }

    pub fn params(&self, f3: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.mu.forward(f3)?, softplus(&self.sigma.forward(f3)?)?))
    }

    pub fn forward(&self, f3: &Tensor, samples: usize, rng: &mut Rng) -> Result<BnnOutput> {
        let (mu, sigma) = self.params(f3)?;
        sample_latent(&mu, &sigma, samples, rng)
    }
}

/// Draws `samples` latents and returns their unbiased per-pixel variance.
pub fn sample_latent(mu: &Tensor, sigma: &Tensor, samples: usize, rng: &mut Rng) -> Result<BnnOutput> {
    if samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 Monte Carlo samples, got {samples}")));
    }
    let n = mu.elem_count();
    let noise: Vec<f64> = (0..samples * n).map(|_| StandardNormal.sample(rng)).collect();
    let mut shape = vec![samples];
    shape.extend_from_slice(mu.dims());
    let eps = Tensor::from_vec(noise, shape, mu.device())?.to_dtype(mu.dtype())?;
    let draws = eps.broadcast_mul(&sigma.unsqueeze(0)?)?.broadcast_add(&mu.unsqueeze(0)?)?;
    let mean = draws.mean_keepdim(0)?;
    let variance = (draws.broadcast_sub(&mean)?.sqr()?.sum(0)? / (samples as f64 - 1.0))?;
    let first_draw = draws.get(0)?;
    Ok(BnnOutput { mu: mu.clone(), sigma: sigma.clone(), variance, first_draw })
}

/// Attention map from `[M_c, U_E, U_B]` at a quarter of the input size.
pub struct ConvFusion {
    convs: [Conv2d; 4],
    mid: Conv2d,
    out: Conv2d,
}

impl ConvFusion {
    pub fn new(s: &Scope, width: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(&s.pp("stack0a"), 3, width, 3, 1)?,
                Conv2d::new(&s.pp("stack0b"), width, width, 3, 2)?,
                Conv2d::new(&s.pp("stack1a"), width, width, 3, 1)?,
                Conv2d::new(&s.pp("stack1b"), width, width, 3, 2)?,
            ],
            mid: Conv2d::new(&s.pp("mid"), width, width, 3, 1)?,
            out: Conv2d::new(&s.pp("out"), width, 1, 1, 1)?,
        })
    }

    pub fn forward(&self, m_cat: &Tensor) -> Result<Tensor> {
        if m_cat.dim(1)? != 3 {
            return Err(Error::dims("[B, 3, H, W] fusion input", m_cat.dims()));
        }
        let mut h = m_cat.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        let h = self.mid.forward(&h)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)
    }
}

/// `f ⊙ (1 − A)` with `A` resized bilinearly to `f`'s grid.
pub fn residual_attention(f: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = f.dims4()?;
    let a = resize_bilinear(attn, h, w)?;
    Ok(f.broadcast_mul(&(1.0 - a)?)?)
}

/// Pads `[B, C, H, W]` with zeros to multiples of `ws` and splits it into
/// `[B·nh·nw, ws·ws, C]` token windows.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, c, h, w) = x.dims4()?;
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let x = x.pad_with_zeros(2, 0, hp - h)?.pad_with_zeros(3, 0, wp - w)?;
    let (nh, nw) = (hp / ws, wp / ws);
    let t = x.reshape(vec![b, c, nh, ws, nw, ws])?.permute(vec![0, 2, 4, 3, 5, 1])?.contiguous()?;
    Ok((t.reshape((b * nh * nw, ws * ws, c))?, (nh, nw)))
}

/// Inverse of [`window_partition`], cropping the padding back to `(h, w)`.
pub fn window_merge(t: &Tensor, ws: usize, grid: (usize, usize), h: usize, w: usize) -> Result<Tensor> {
    let (n, l, c) = t.dims3()?;
    let (nh, nw) = grid;
    if l != ws * ws || n % (nh * nw) != 0 {
        return Err(Error::dims(format!("[B*{nh}*{nw}, {}, C] windows", ws * ws), t.dims()));
    }
    let b = n / (nh * nw);
    let x = t.reshape(vec![b, nh, nw, ws, ws, c])?.permute(vec![0, 5, 1, 3, 2, 4])?.contiguous()?;
    crop_to(&x.reshape((b, c, nh * ws, nw * ws))?, h, w)
}

/// Windowed multi-head cross attention: queries from the discriminative map,
/// keys and values from the entropy and BNN maps.
pub struct WindowCrossAttention {
    cfg: FusionConfig,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    norm: RmsNorm,
    out: Conv2d,
}

impl WindowCrossAttention {
    pub fn new(s: &Scope, cfg: &FusionConfig) -> Result<Self> {
        let d = cfg.width();
        Ok(Self {
            cfg: cfg.clone(),
            q: Conv2d::new(&s.pp("q"), 1, d, 1, 1)?,
            k: Conv2d::new(&s.pp("k"), 2, d, 1, 1)?,
            v: Conv2d::new(&s.pp("v"), 2, d, 1, 1)?,
            norm: RmsNorm::new(&s.pp("norm"), d)?,
            out: Conv2d::with_init(&s.pp("out"), d, 1, 1, 1, Init::Const(0.0))?,
        })
    }

    fn heads(&self, t: &Tensor) -> Result<Tensor> {
        let (n, l, _) = t.dims3()?;
        Ok(t.reshape((n, l, self.cfg.heads, self.cfg.head_dim))?.transpose(1, 2)?.contiguous()?)
    }

    fn attend(&self, query_map: &Tensor, kv_maps: &Tensor, keep_weights: bool) -> Result<(Tensor, Option<Tensor>)> {
        let (_, _, h, w) = query_map.dims4()?;
        let ws = self.cfg.window_size;
        let (q, grid) = window_partition(&self.q.forward(query_map)?, ws)?;
        let (k, _) = window_partition(&self.k.forward(kv_maps)?, ws)?;
        let (v, _) = window_partition(&self.v.forward(kv_maps)?, ws)?;
        let (n, l, _) = q.dims3()?;
        let heads = self.cfg.heads;
        let flat = |t: Tensor| -> Result<Tensor> { Ok(self.heads(&t)?.reshape((n * heads, l, self.cfg.head_dim))?) };
        let (q, k, v) = (flat(q)?, flat(k)?, flat(v)?);
        let scale = 1.0 / (self.cfg.head_dim as f64).sqrt();
        let (attended, weights) = if keep_weights {
            let (a, wts) = attention_with_weights(&q, &k, &v, scale)?;
            (a, Some(wts.reshape((n, heads, l, l))?))
        } else {
            (attention(&q, &k, &v, scale)?, None)
        };
        let attended = attended.reshape((n, heads, l, self.cfg.head_dim))?.transpose(1, 2)?.contiguous()?.reshape((n, l, self.cfg.width()))?;
        let attended = (self.norm.forward(&attended)? + &attended)?;
        let merged = window_merge(&attended, ws, grid, h, w)?;
        let fused = (self.out.forward(&merged)? + query_map)?.clamp(0.0, 1.0)?;
        Ok((fused, weights))
    }

    /// Returns the fused map and the attention weights `[N, heads, L, L]`
    /// (unfused path, for inspection).
    pub fn forward_with_weights(&self, query_map: &Tensor, kv_maps: &Tensor) -> Result<(Tensor, Tensor)> {
        let (f, w) = self.attend(query_map, kv_maps, true)?;
        Ok((f, w.expect("weights requested")))
    }

    pub fn forward(&self, query_map: &Tensor, kv_maps: &Tensor) -> Result<Tensor> {
        Ok(self.attend(query_map, kv_maps, false)?.0)
    }
}

/// Convolution, dropout, leaky activation, batch norm.
struct DecoderStage {
    up: ConvTranspose2d,
    conv: Conv2d,
    norm: BatchNorm2d,
}

pub struct HuqNet {
    cfg: HuqNetConfig,
    backbone: Encoder,
    bnn: BnnHead,
    fusion_conv: ConvFusion,
    stages: Vec<DecoderStage>,
    head_reduce: Conv2d,
    head_conv: Conv2d,
    head_out: Conv2d,
    attention: WindowCrossAttention,
}

impl HuqNet {
    /// Parameter-name prefixes of the learning-rate groups.
    pub const BACKBONE: &'static str = "backbone.";
    pub const BNN: &'static str = "bnn.";

    pub fn new(s: &Scope, cfg: &HuqNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone;
        let backbone = Encoder::new(&s.pp("backbone"), &EncoderConfig { in_channels: 3, channels: c })?;
        let mut stages = Vec::new();
        for i in (0..3).rev() {
            let ss = s.pp(format!("decoder{i}"));
            stages.push(DecoderStage {
                up: ConvTranspose2d::new(&ss.pp("up"), c[i + 1], c[i], 2)?,
                conv: Conv2d::new(&ss.pp("conv"), 2 * c[i], c[i], 3, 1)?,
                norm: BatchNorm2d::new(&ss.pp("norm"), c[i])?,
            });
        }
        let hc = cfg.head_channels;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            bnn: BnnHead::new(&s.pp("bnn"), c[2])?,
            fusion_conv: ConvFusion::new(&s.pp("cf"), cfg.fusion_channels)?,
            stages,
            head_reduce: Conv2d::new(&s.pp("head_reduce"), c[0], hc, 1, 1)?,
            head_conv: Conv2d::new(&s.pp("head_conv"), hc + 3, hc, 3, 1)?,
            head_out: Conv2d::new(&s.pp("head_out"), hc, 1, 1, 1)?,
            attention: WindowCrossAttention::new(&s.pp("attn"), &cfg.fusion)?,
        })
    }

    pub fn config(&self) -> &HuqNetConfig {
        &self.cfg
    }

    pub fn backbone_features(&self, x: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.forward(x)
    }

    pub fn decode(&self, modulated: &FeaturePyramid, mode: &mut Mode) -> Result<Tensor> {
        let mut u = modulated.level(3).clone();
        for (stage, i) in self.stages.iter().zip((0..3).rev()) {
            let f = modulated.level(i);
            let (_, _, h, w) = f.dims4()?;
            let up = crop_to(&stage.up.forward(&u)?, h, w)?;
            let h = stage.conv.forward(&Tensor::cat(&[up, f.clone()], 1)?)?;
            let h = leaky_relu(&dropout(&h, self.cfg.dropout, mode)?, 0.01)?;
            u = stage.norm.forward(&h, mode)?;
        }
        Ok(u)
    }

    /// Full forward pass. `mode` drives dropout and batch statistics;
    /// `bnn_rng` drives the latent draws.
    pub fn estimate(&self, x: &Tensor, mc: &Tensor, mode: &mut Mode, bnn_rng: &mut Rng) -> Result<UncertaintyBundle> {
        let (b, xc, h, w) = x.dims4()?;
        if xc != 3 || mc.dims() != [b, 1, h, w] {
            return Err(Error::dims(format!("[{b}, 3, H, W] image and [{b}, 1, H, W] mask"), (x.dims(), mc.dims())));
        }
        let feats = self.backbone.forward(x)?;
        let bnn = self.bnn.forward(feats.level(2), self.cfg.mc_samples, bnn_rng)?;
        let u_b = mean_max_normalize(&resize_bilinear(&bnn.variance, h, w)?)?;
        let sample_logits = resize_bilinear(&bnn.first_draw, h, w)?;
        let u_e = entropy_map(&mc.detach())?;
        let m_cat = Tensor::cat(&[mc.clone(), u_e.clone(), u_b.clone()], 1)?;

        let attn = self.fusion_conv.forward(&m_cat)?;
        let modulated = if self.cfg.residual_attention {
            FeaturePyramid::new(feats.levels().iter().map(|f| residual_attention(f, &attn)).collect::<Result<_>>()?)?
        } else {
            feats
        };
        let u1 = self.decode(&modulated, mode)?;
        let reduced = resize_bilinear(&self.head_reduce.forward(&u1)?, h, w)?;
        let head = leaky_relu(&self.head_conv.forward(&Tensor::cat(&[reduced, m_cat], 1)?)?, 0.01)?;
        let u_d = candle_nn::ops::sigmoid(&self.head_out.forward(&head)?)?;
        let fused = self.attention.forward(&u_d, &Tensor::cat(&[u_e.clone(), u_b.clone()], 1)?)?;
        Ok(UncertaintyBundle {
            entropy: u_e,
            bnn: u_b,
            discriminative: u_d,
            fused,
            mu: bnn.mu,
            sigma: bnn.sigma,
            sample_logits,
            attention: attn,
        })
    }

    pub fn attention_module(&self) -> &WindowCrossAttention {
        &self.attention
    }
}

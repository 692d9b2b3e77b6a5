//! Building blocks shared by the denoiser, HUQNet and the prior segmenters.

use super::params::{Init, Scope};
use crate::error::Result;
use crate::rng::Rng;
use candle_core::{DType, Tensor, D};
use rand::Rng as _;

/// Forward-pass mode. Training mode enables dropout (driven by the supplied
/// RNG) and batch statistics in batch norm.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(s, c_in, c_out, k, stride, Init::FanIn)
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(s, c_in, c_out, k, stride, Init::Const(0.0))
    }

    pub fn with_init(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = s.get("weight", &[c_out, c_in, k, k], init)?;
        let bias_init = if matches!(init, Init::Const(_)) { init } else { Init::Const(0.0) };
        let bias = Some(s.get("bias", &[c_out], bias_init)?);
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with kernel = stride (exact 2× upsampling for
/// stride 2).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        // Weight layout [c_in, c_out, k, k]; fan-in is c_in·k·k for the output.
        let weight = s.get("weight", &[c_in, c_out, stride, stride], Init::Normal((1.0 / c_in as f64).sqrt()))?;
        let bias = s.get("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { weight: s.get("weight", &[d_out, d_in], Init::FanIn)?, bias: s.get("bias", &[d_out], Init::Const(0.0))? })
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[d_out, d_in], Init::Const(0.0))?,
            bias: s.get("bias", &[d_out], Init::Const(0.0))?,
        })
    }

    /// `[B, d_in] → [B, d_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization over `[B, C, H, W]` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| channels % g == 0 && channels >= *g).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: default_groups(channels),
            weight: s.get("weight", &[channels], Init::Const(1.0))?,
            bias: s.get("bias", &[channels], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: (String, Tensor),
    running_var: (String, Tensor),
    store: super::params::ParamStore,
}

impl BatchNorm2d {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[channels], Init::Const(1.0))?,
            bias: s.get("bias", &[channels], Init::Const(0.0))?,
            running_mean: s.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: s.buffer("running_var", &[channels], Init::Const(1.0))?,
            store: s.store().clone(),
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if mode.is_train() {
            let xt = x.transpose(0, 1)?.flatten_from(1)?;
            let mean = xt.mean_keepdim(1)?;
            let var = xt.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let (mean, var) = (mean.flatten_all()?, var.flatten_all()?);
            let m = 0.1;
            if let (Some(rm), Some(rv)) =
                (self.store.buffer_var(&self.running_mean.0), self.store.buffer_var(&self.running_var.0))
            {
                rm.set(&((rm.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?)?;
                rv.set(&((rv.as_tensor() * (1.0 - m))? + (var.detach() * m)?)?)?;
            }
            (mean, var)
        } else {
            let rm = self.store.buffer_var(&self.running_mean.0).map(|v| v.as_tensor().clone());
            let rv = self.store.buffer_var(&self.running_var.0).map(|v| v.as_tensor().clone());
            (rm.unwrap_or_else(|| self.running_mean.1.clone()), rv.unwrap_or_else(|| self.running_var.1.clone()))
        };
        let normed = x.broadcast_sub(&mean.reshape(shape)?)?.broadcast_div(&(var.reshape(shape)? + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight.reshape(shape)?)?.broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// RMS normalization over the last dimension with a learned scale.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    weight: Tensor,
}

impl RmsNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self { weight: s.get("weight", &[dim], Init::Const(1.0))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rms = (x.sqr()?.mean_keepdim(D::Minus1)? + 1e-6)?.sqrt()?;
        Ok(x.broadcast_div(&rms)?.broadcast_mul(&self.weight)?)
    }
}

/// Channel-wise parametric ReLU.
#[derive(Debug, Clone)]
pub struct PRelu {
    weight: Tensor,
}

impl PRelu {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self { weight: s.get("weight", &[channels], Init::Const(0.25))? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let neg = x.neg()?.relu()?.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?;
        Ok((x.relu()? - neg)?)
    }
}

/// Inverted dropout with a mask drawn from the mode's RNG.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Numerically stable `log(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Sinusoidal timestep features `[B, dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(s: &Scope, sinusoid_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            dim: sinusoid_dim,
            fc1: Linear::new(&s.pp("fc1"), sinusoid_dim, out_dim)?,
            fc2: Linear::new(&s.pp("fc2"), out_dim, out_dim)?,
        })
    }

    pub fn forward(&self, ts: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let e = sinusoidal_embedding(ts, self.dim, dtype, device)?;
        self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)
    }
}

/// Time-conditioned bias `x + Linear(SiLU(t))`, broadcast over space.
#[derive(Debug, Clone)]
pub struct TimeBias {
    proj: Linear,
}

impl TimeBias {
    pub fn new(s: &Scope, temb_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(s, temb_dim, channels)? })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let bias = self.proj.forward(&silu(temb)?)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_add(&bias)?)
    }
}

/// Row-stochastic `[out, in]` matrix for 1-D linear interpolation with
/// half-pixel centres (no antialiasing).
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of `[B, C, H, W]` to `(h, w)`, differentiable.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(interp_matrix(xh, h), (h, xh), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(interp_matrix(xw, w), (w, xw), dev)?.to_dtype(x.dtype())?;
    let flat = x.reshape((b * c, xh, xw))?;
    let rows = ah.unsqueeze(0)?.broadcast_as((b * c, h, xh))?.contiguous()?.matmul(&flat)?;
    let out = rows.matmul(&aw.t()?.unsqueeze(0)?.broadcast_as((b * c, xw, w))?.contiguous()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Nearest-neighbour 2× upsampling cropped to `(h, w)`.
pub fn upsample_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x.clone());
    }
    let (fh, fw) = (h.div_ceil(xh), w.div_ceil(xw));
    let up = x.upsample_nearest2d(xh * fh, xw * fw)?;
    crop_to(&up, h, w)
}

pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, xh, xw) = x.dims4()?;
    let mut y = x.clone();
    if xh != h {
        y = y.narrow(2, 0, h)?;
    }
    if xw != w {
        y = y.narrow(3, 0, w)?;
    }
    Ok(y)
}

/// Spatial size after a stride-2, padding-1, 3×3 convolution.
pub fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Spatial sizes of the four pyramid levels (strides 4, 8, 16, 32).
pub fn pyramid_sizes(h: usize, w: usize) -> [(usize, usize); 4] {
    let mut s = (halve(halve(h)), halve(halve(w)));
    let mut out = [(0, 0); 4];
    for o in out.iter_mut() {
        *o = s;
        s = (halve(s.0), halve(s.1));
    }
    out
}

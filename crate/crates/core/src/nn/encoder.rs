//! Four-stage convolutional encoder producing a [`FeaturePyramid`].

use super::layers::{Conv2d, GroupNorm};
use super::params::Scope;
use super::FeaturePyramid;
use crate::error::Result;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: [usize; 4],
}

struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(s: &Scope, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(&s.pp("conv"), c_in, c_out, 3, stride)?, norm: GroupNorm::new(&s.pp("norm"), c_out)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

/// Stem of two stride-2 convolutions, then one stride-2 stage per extra level.
pub struct Encoder {
    cfg: EncoderConfig,
    stem: [ConvNorm; 2],
    stages: Vec<[ConvNorm; 2]>,
}

impl Encoder {
    pub fn new(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.channels;
        let half = (c[0] / 2).max(1);
        let stem = [ConvNorm::new(&s.pp("stem0"), cfg.in_channels, half, 2)?, ConvNorm::new(&s.pp("stem1"), half, c[0], 2)?];
        let mut stages = Vec::new();
        for i in 0..4 {
            let ss = s.pp(format!("stage{i}"));
            let c_in = if i == 0 { c[0] } else { c[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            stages.push([ConvNorm::new(&ss.pp("a"), c_in, c[i], stride)?, ConvNorm::new(&ss.pp("b"), c[i], c[i], 1)?]);
        }
        Ok(Self { cfg: cfg.clone(), stem, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut h = self.stem[1].forward(&self.stem[0].forward(x)?)?;
        let mut levels = Vec::with_capacity(4);
        for st in &self.stages {
            h = st[1].forward(&st[0].forward(&h)?)?;
            levels.push(h.clone());
        }
        FeaturePyramid::new(levels)
    }
}

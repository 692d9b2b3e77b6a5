//! Neural-network components built on candle: a seeded parameter store,
//! layers, the conditional denoiser, HUQNet and the shared 4-level encoder.

pub mod attention;
pub mod denoiser;
pub mod encoder;
pub mod huqnet;
pub mod layers;
pub mod params;

use crate::error::{Error, Result};
use candle_core::Tensor;

pub use denoiser::{Conditioning, Denoiser, DenoiserConfig};
pub use encoder::{Encoder, EncoderConfig};
pub use huqnet::{FusionConfig, HuqNet, HuqNetConfig, UncertaintyBundle};
pub use layers::Mode;
pub use params::{Init, ParamStore, Scope};

/// Four feature maps at strides 4, 8, 16 and 32 relative to the input, each
/// `[B, C_i, H_i, W_i]` with `H_{i+1} = ceil(H_i / 2)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::InvalidArgument(format!("feature pyramid needs 4 levels, got {}", levels.len())));
        }
        let (b, _, mut h, mut w) = levels[0].dims4()?;
        for l in &levels[1..] {
            let (lb, _, lh, lw) = l.dims4()?;
            let expected = (layers::halve(h), layers::halve(w));
            if lb != b || (lh, lw) != expected {
                return Err(Error::dims(format!("[{b}, _, {}, {}]", expected.0, expected.1), l.dims()));
            }
            (h, w) = (lh, lw);
        }
        Ok(Self { levels })
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dim(0).unwrap_or(0)
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].dim(1).unwrap_or(0))
    }

    /// Checks that the pyramid fits an `h×w` input.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let want = layers::pyramid_sizes(h, w);
        for (i, l) in self.levels.iter().enumerate() {
            let (_, _, lh, lw) = l.dims4()?;
            if (lh, lw) != want[i] {
                return Err(Error::dims(format!("level {i} at {:?}", want[i]), (lh, lw)));
            }
        }
        Ok(())
    }

    pub fn detach(&self) -> Self {
        Self { levels: self.levels.iter().map(|t| t.detach()).collect() }
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self { levels: self.levels.iter().map(|t| t.zeros_like()).collect::<candle_core::Result<_>>()? })
    }

    /// Select samples `idx` along the batch dimension.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), self.levels[0].device())?;
        Ok(Self { levels: self.levels.iter().map(|t| t.index_select(&ids, 0)).collect::<candle_core::Result<_>>()? })
    }

    pub fn cat(parts: &[FeaturePyramid]) -> Result<Self> {
        let levels = (0..4)
            .map(|i| Tensor::cat(&parts.iter().map(|p| p.levels[i].clone()).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

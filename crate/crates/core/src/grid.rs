//! Dense H×W maps. All maps are row-major `f64` grids; the newtypes carry the
//! value-range invariant of what they hold.

use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor};

/// Plain row-major `f64` grid with no range invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "grid data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Grid { height: self.height, width: self.width, data })
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Read a single-channel map from a `[H, W]`, `[1, H, W]` or `[1, 1, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Grid> {
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::InvalidArgument(format!("expected single map tensor, got {dims:?}"))),
        };
        let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Grid::new(h, w, data)
    }
}

macro_rules! unit_map {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Grid);

        impl $name {
            /// Builds the map, clamping every entry into `[0, 1]`.
            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                Ok(Self::from_grid(Grid::new(height, width, data)?))
            }

            pub fn from_grid(g: Grid) -> Self {
                Self(g.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Self {
                Self::from_grid(Grid::filled(height, width, value))
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                Self(Grid::filled(height, width, 0.0))
            }

            pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
                Self::from_grid(Grid::from_fn(height, width, f))
            }

            pub fn grid(&self) -> &Grid {
                &self.0
            }

            pub fn into_grid(self) -> Grid {
                self.0
            }

            pub fn shape(&self) -> (usize, usize) {
                self.0.shape()
            }

            pub fn height(&self) -> usize {
                self.0.height()
            }

            pub fn width(&self) -> usize {
                self.0.width()
            }

            #[inline]
            pub fn get(&self, r: usize, c: usize) -> f64 {
                self.0.get(r, c)
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn mean(&self) -> f64 {
                self.0.mean()
            }

            pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
                self.0.to_tensor(dtype, device)
            }

            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                Ok(Self::from_grid(Grid::from_tensor(t)?))
            }
        }
    };
}

unit_map!(
    /// Per-pixel probabilities (coarse masks, latents, Bernoulli parameters).
    ProbMap
);
unit_map!(
    /// Per-pixel uncertainty in `[0, 1]`.
    UncertaintyMap
);

impl From<UncertaintyMap> for ProbMap {
    fn from(u: UncertaintyMap) -> Self {
        ProbMap(u.0)
    }
}

impl From<ProbMap> for UncertaintyMap {
    fn from(p: ProbMap) -> Self {
        UncertaintyMap(p.0)
    }
}

/// Hard {0, 1} mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMap(Grid);

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        let vals = data.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(Grid::new(height, width, vals)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::filled(height, width, 0.0))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(height, width, |r, c| if f(r, c) { 1.0 } else { 0.0 }))
    }

    /// Threshold a grid: `v > threshold` becomes 1.
    pub fn threshold(g: &Grid, threshold: f64) -> Self {
        Self(g.map(|v| if v > threshold { 1.0 } else { 0.0 }))
    }

    /// Accepts a grid only if it is already exactly binary.
    pub fn try_from_grid(g: Grid) -> Result<Self> {
        if g.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("binary map entries must be exactly 0 or 1".into()));
        }
        Ok(Self(g))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    #[inline]
    pub fn is_set(&self, r: usize, c: usize) -> bool {
        self.0.get(r, c) == 1.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn count_ones(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count_ones() as f64 / self.0.len().max(1) as f64
    }

    pub fn to_prob(&self) -> ProbMap {
        ProbMap(self.0.clone())
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.0.to_tensor(dtype, device)
    }
}

/// RGB image in `[0, 1]`, stored channel-major (3×H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::InvalidArgument(format!(
                "image data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, ch: usize, r: usize, c: usize) -> f32 {
        self.data[(ch * self.height + r) * self.width + c]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Channel-averaged intensity at a pixel.
    pub fn intensity(&self, r: usize, c: usize) -> f64 {
        (0..3).map(|ch| self.get(ch, r, c) as f64).sum::<f64>() / 3.0
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Stable fingerprint of the pixel content.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::label_hash("image") ^ ((self.height as u64) << 32 | self.width as u64);
        for v in &self.data {
            h = crate::rng::mix64(h ^ v.to_bits() as u64);
        }
        h
    }
}

/// Stack maps into a `[B, 1, H, W]` tensor.
pub fn stack_maps<'a>(maps: impl IntoIterator<Item = &'a Grid>, dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = maps.into_iter().map(|g| g.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Stack images into a `[B, 3, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>, dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images.into_iter().map(|g| g.to_tensor(dtype, device)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Split a `[B, 1, H, W]` tensor into per-sample grids.
pub fn unstack_maps(t: &Tensor) -> Result<Vec<Grid>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!("expected 1 channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    flat.chunks(h * w).take(b).map(|ch| Grid::new(h, w, ch.to_vec())).collect()
}

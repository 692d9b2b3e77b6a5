//! Synthetic camouflage corpus and its on-disk layout:
//!
//! ```text
//! root/manifest.toml
//! root/train/images/<id>.png   8-bit RGB
//! root/train/masks/<id>.png    8-bit grayscale, foreground > 127
//! root/test/images/<id>.png
//! root/test/masks/<id>.png
//! ```

mod synth;

pub use synth::{dequantize, generate_camo_sample, quantize, DatasetSample, TextureParams, MAX_AREA, MIN_AREA};

use crate::error::{Error, Result};
use crate::grid::{BinaryMap, Image};
use crate::prior::CorruptionSpec;
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    /// Foreground/background parameter offset; lower is harder.
    pub strength: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub texture: TextureParams,
    /// Degradation used by the corrupted-oracle prior on this corpus.
    pub corruption: CorruptionSpec,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            seed: 0,
            image_size: 64,
            strength: 0.4,
            train_count: 500,
            test_count: 100,
            texture: TextureParams::default(),
            corruption: CorruptionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", self.format_version)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("strength must be in [0, 1], got {}", self.strength)));
        }
        self.corruption.validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    pub fn sample_id(split: Split, index: usize) -> String {
        format!("{}-{index:05}", split.name())
    }

    pub fn generate_sample(&self, split: Split, index: usize) -> Result<DatasetSample> {
        let seed = derive_seed(self.seed, split.name(), index as u64);
        generate_camo_sample(seed, self.image_size, self.strength, &self.texture, &Self::sample_id(split, index))
    }

    pub fn generate(&self, split: Split) -> Result<Vec<DatasetSample>> {
        self.validate()?;
        (0..self.count(split)).map(|i| self.generate_sample(split, i)).collect()
    }
}

/// A loaded corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<DatasetSample>,
    pub test: Vec<DatasetSample>,
}

impl Dataset {
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self { manifest: manifest.clone(), train: manifest.generate(Split::Train)?, test: manifest.generate(Split::Test)? })
    }

    pub fn split(&self, split: Split) -> &[DatasetSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

fn split_dirs(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let base = root.join(split.name());
    (base.join("images"), base.join("masks"))
}

pub fn save_image_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = image.shape();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| (image.get(ch, r, c) as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
            buf.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Grayscale PNG of a map in `[0, 1]`.
pub fn save_map_png(values: &crate::Grid, path: &Path) -> Result<()> {
    let (h, w) = values.shape();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([(values.get(r as usize, c as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| corrupt(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (c, r, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + r as usize) * w + c as usize] = dequantize(px.0[ch]);
        }
    }
    Image::new(h, w, data)
}

/// Grayscale PNG as values in `[0, 1]`.
pub fn load_gray_png(path: &Path) -> Result<crate::Grid> {
    let img = image::open(path).map_err(|e| corrupt(path, e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    crate::Grid::new(h, w, img.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}

/// Loads a mask, binarizing at > 127.
pub fn load_mask_png(path: &Path) -> Result<BinaryMap> {
    let img = image::open(path).map_err(|e| corrupt(path, e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMap::new(h, w, img.pixels().map(|p| p.0[0] > 127).collect())
}

pub fn write_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let text = toml::to_string_pretty(manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(root.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e.to_string()))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// Writes samples of one split under `root`.
pub fn write_split(samples: &[DatasetSample], root: &Path, split: Split) -> Result<()> {
    let (images, masks) = split_dirs(root, split);
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for s in samples {
        save_image_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        save_map_png(s.mask.grid(), &masks.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// Generates the corpus described by `manifest` and writes it to `root`.
pub fn write_dataset(manifest: &DatasetManifest, root: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(manifest)?;
    write_manifest(manifest, root)?;
    write_split(&ds.train, root, Split::Train)?;
    write_split(&ds.test, root, Split::Test)?;
    Ok(ds)
}

fn load_split(root: &Path, split: Split, expected: usize) -> Result<Vec<DatasetSample>> {
    let (images, masks) = split_dirs(root, split);
    let mut ids: Vec<String> = match std::fs::read_dir(&images) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".png")).map(str::to_string))
            .collect(),
        Err(e) => return Err(corrupt(&images, e.to_string())),
    };
    ids.sort();
    if ids.len() != expected {
        return Err(corrupt(&images, format!("manifest lists {expected} {} samples, found {}", split.name(), ids.len())));
    }
    ids.into_iter()
        .map(|id| {
            let ip = images.join(format!("{id}.png"));
            let mp = masks.join(format!("{id}.png"));
            if !mp.exists() {
                return Err(corrupt(&mp, "missing mask file"));
            }
            let image = load_image_png(&ip)?;
            let mask = load_mask_png(&mp)?;
            if image.shape() != mask.shape() {
                return Err(corrupt(&mp, format!("mask shape {:?} does not match image {:?}", mask.shape(), image.shape())));
            }
            Ok(DatasetSample { id, image, mask })
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let train = load_split(root, Split::Train, manifest.train_count)?;
    let test = load_split(root, Split::Test, manifest.test_count)?;
    Ok(Dataset { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest { train_count: 3, test_count: 2, image_size: 24, ..Default::default() };
        let ds = write_dataset(&m, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, m);
        assert_eq!(back.train.len(), 3);
        assert_eq!(back.test.len(), 2);
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a, b);
        }
        std::fs::remove_file(dir.path().join("test/masks/test-00001.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptDataset { .. })));
    }
}

//! Run configuration, stored as `config.toml` in the run directory.

use crate::diffusion::SigmaRule;
use crate::error::{Error, Result};
use crate::nn::{DenoiserConfig, HuqNetConfig};
use crate::prior::PRIOR_CHANNELS;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    #[default]
    CorruptedOracle,
    ToyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub seed: u64,
    pub toy_epochs: usize,
    pub toy_learning_rate: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::CorruptedOracle, seed: 0, toy_epochs: 2, toy_learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_denoiser: f64,
    pub lr_backbone: f64,
    pub lr_bnn: f64,
    pub lr_huqnet: f64,
    pub batch_size: usize,
    pub huqnet_epochs: usize,
    pub denoiser_max_epochs: usize,
    pub finetune_max_epochs: usize,
    /// Early-stopping patience, in epochs.
    pub patience: usize,
    /// Fraction of the training split held out for early stopping.
    pub validation_fraction: f64,
    /// Sampling steps used for validation refinement.
    pub validation_steps: usize,
    pub timesteps: usize,
    pub decay_power: f64,
    pub weight_decay: f64,
    pub bnn_kl_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings for pretrained backbones and long GPU schedules.
    pub fn full_scale() -> Self {
        Self {
            lr_denoiser: 1e-4,
            lr_backbone: 1e-7,
            lr_bnn: 1e-6,
            lr_huqnet: 1e-3,
            batch_size: 36,
            huqnet_epochs: 80,
            denoiser_max_epochs: 200,
            finetune_max_epochs: 50,
            patience: 10,
            validation_fraction: 0.1,
            validation_steps: 3,
            timesteps: 1000,
            decay_power: 0.9,
            weight_decay: 1e-4,
            bnn_kl_weight: crate::losses::DEFAULT_BNN_KL_WEIGHT,
            seed: 0,
        }
    }
}

impl Default for TrainConfig {
    /// Desk-scale schedule: randomly initialized networks and a small step
    /// budget need larger rates than the published ones.
    fn default() -> Self {
        Self {
            lr_denoiser: 2e-3,
            lr_backbone: 1e-3,
            lr_bnn: 1e-3,
            lr_huqnet: 2e-3,
            batch_size: 16,
            huqnet_epochs: 8,
            denoiser_max_epochs: 6,
            finetune_max_epochs: 2,
            ..Self::full_scale()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    #[default]
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub steps: usize,
    pub sampler: Sampler,
    pub sigma_rule: SigmaRule,
    pub threshold: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 10, sampler: Sampler::Ddim, sigma_rule: SigmaRule::Ratio, threshold: 0.5, seed: 0, batch_size: 25 }
    }
}

impl InferenceConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(format!("inference steps must be in 1..={timesteps}, got {}", self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("inference batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub prior: PriorConfig,
    pub denoiser: DenoiserConfig,
    pub huqnet: HuqNetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            prior: PriorConfig::default(),
            denoiser: DenoiserConfig::compact(PRIOR_CHANNELS),
            huqnet: HuqNetConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        for (name, lr) in [("lr_denoiser", t.lr_denoiser), ("lr_backbone", t.lr_backbone), ("lr_bnn", t.lr_bnn), ("lr_huqnet", t.lr_huqnet)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if t.batch_size == 0 || t.timesteps == 0 {
            return Err(Error::Config("batch_size and timesteps must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction must be in [0, 1), got {}", t.validation_fraction)));
        }
        if t.validation_steps == 0 || t.validation_steps > t.timesteps {
            return Err(Error::Config("validation_steps must be in 1..=timesteps".into()));
        }
        if self.denoiser.timesteps != t.timesteps {
            return Err(Error::Config(format!(
                "denoiser.timesteps ({}) must equal train.timesteps ({})",
                self.denoiser.timesteps, t.timesteps
            )));
        }
        if self.denoiser.prior_channels != PRIOR_CHANNELS {
            return Err(Error::Config(format!("denoiser.prior_channels must be {PRIOR_CHANNELS:?}")));
        }
        self.denoiser.validate()?;
        self.huqnet.validate()?;
        self.inference.validate(t.timesteps)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn full_scale_rates() {
        let t = TrainConfig::full_scale();
        assert_eq!((t.lr_denoiser, t.lr_backbone, t.lr_bnn, t.lr_huqnet), (1e-4, 1e-7, 1e-6, 1e-3));
        assert_eq!((t.batch_size, t.huqnet_epochs, t.timesteps), (36, 80, 1000));
        assert_eq!(InferenceConfig::default().steps, 10);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_bnn = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.inference.steps = 0;
        assert!(cfg.validate().is_err());
    }
}

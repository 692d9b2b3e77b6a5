//! The three networks of a run plus the noise schedule, and how they are
//! built, saved and restored.

use super::checkpoint;
use super::config::{PriorKind, RunConfig};
use crate::datagen::Dataset;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::nn::{Denoiser, HuqNet, ParamStore};
use crate::prior::{CorruptedOracle, PriorSegmenter, ToyCnnSegmenter, ToyTrainConfig};
use crate::rng::derive_seed;
use candle_core::DType;
use std::path::Path;

pub const HUQNET_KIND: &str = "umbd-huqnet";
pub const DENOISER_KIND: &str = "umbd-denoiser";
pub const HUQNET_FILE: &str = "huqnet.safetensors";
pub const DENOISER_FILE: &str = "denoiser.safetensors";
pub const PRIOR_FILE: &str = "prior.safetensors";

pub struct Models {
    pub prior: Box<dyn PriorSegmenter>,
    pub huqnet: HuqNet,
    pub huqnet_store: ParamStore,
    pub denoiser: Denoiser,
    pub denoiser_store: ParamStore,
    pub schedule: NoiseSchedule,
    pub config: RunConfig,
}

impl Models {
    /// Freshly initialized networks around an existing prior.
    pub fn new(config: &RunConfig, prior: Box<dyn PriorSegmenter>) -> Result<Self> {
        Self::with_dtype(config, prior, DType::F32)
    }

    pub fn with_dtype(config: &RunConfig, prior: Box<dyn PriorSegmenter>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let huqnet_store = ParamStore::new(derive_seed(seed, "huqnet-init", 0), dtype);
        let huqnet = HuqNet::new(&huqnet_store.root(), &config.huqnet)?;
        let denoiser_store = ParamStore::new(derive_seed(seed, "denoiser-init", 0), dtype);
        let denoiser = Denoiser::new(&denoiser_store.root(), &config.denoiser)?;
        Ok(Self {
            prior,
            huqnet,
            huqnet_store,
            denoiser,
            denoiser_store,
            schedule: NoiseSchedule::cosine(config.train.timesteps)?,
            config: config.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sched = serde_json::json!({"kind": "cosine", "steps": self.schedule.steps()});
        checkpoint::save_with_schedule(
            &dir.join(HUQNET_FILE),
            &self.huqnet_store,
            HUQNET_KIND,
            &serde_json::to_value(&self.config.huqnet)?,
            &sched,
        )?;
        checkpoint::save_with_schedule(
            &dir.join(DENOISER_FILE),
            &self.denoiser_store,
            DENOISER_KIND,
            &serde_json::to_value(&self.config.denoiser)?,
            &sched,
        )
    }

    /// Loads whichever network checkpoints exist in `dir`; returns which.
    pub fn load_available(&self, dir: &Path) -> Result<(bool, bool)> {
        let h = dir.join(HUQNET_FILE);
        let d = dir.join(DENOISER_FILE);
        let has_h = h.exists();
        let has_d = d.exists();
        if has_h {
            checkpoint::load_into(&h, &self.huqnet_store, HUQNET_KIND)?;
        }
        if has_d {
            checkpoint::load_into(&d, &self.denoiser_store, DENOISER_KIND)?;
        }
        Ok((has_h, has_d))
    }
}

/// Builds the configured prior. The corrupted oracle registers every image
/// of the corpus; the toy CNN is loaded from `checkpoint_dir` when present,
/// trained on the training split otherwise (and saved there).
pub fn build_prior(config: &RunConfig, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<Box<dyn PriorSegmenter>> {
    match config.prior.kind {
        PriorKind::CorruptedOracle => {
            let mut oracle = CorruptedOracle::new(data.manifest.corruption.clone(), config.prior.seed)?;
            for s in data.train.iter().chain(&data.test) {
                oracle.register(&s.image, &s.mask)?;
            }
            Ok(Box::new(oracle))
        }
        PriorKind::ToyCnn => {
            if let Some(dir) = checkpoint_dir {
                let p = dir.join(PRIOR_FILE);
                if p.exists() {
                    return Ok(Box::new(ToyCnnSegmenter::load(&p)?));
                }
            }
            let pairs: Vec<_> = data.train.iter().map(|s| (&s.image, &s.mask)).collect();
            let net = ToyCnnSegmenter::train(
                &pairs,
                &ToyTrainConfig {
                    epochs: config.prior.toy_epochs,
                    batch_size: config.train.batch_size,
                    learning_rate: config.prior.toy_learning_rate,
                    seed: config.prior.seed,
                },
            )?;
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                net.save(&dir.join(PRIOR_FILE))?;
            }
            Ok(Box::new(net))
        }
    }
}

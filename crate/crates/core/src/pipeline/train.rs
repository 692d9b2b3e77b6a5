//! The three training stages: uncertainty network, denoiser, then
//! uncertainty fine-tuning with the denoiser frozen.

use super::config::{InferenceConfig, RunConfig};
use super::models::Models;
use super::refine::{refine_all, RefineInput, UncertaintySource};
use crate::datagen::DatasetSample;
use crate::diffusion::tensor_ops::{per_sample, posterior, posterior_coefficients};
use crate::error::{Error, Result};
use crate::grid::{stack_images, stack_maps};
use crate::losses::{diffusion_loss, huqnet_loss, LossReport};
use crate::nn::{Conditioning, FeaturePyramid, HuqNet, Mode, ParamStore};
use crate::rng::{derive_seed, rng_for, Rng};
use candle_core::{backprop::GradStore, DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// One row of `logs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub component: String,
    pub value: f64,
}

pub type Logger<'a> = &'a mut dyn FnMut(&LogRow) -> Result<()>;

fn log_report(log: Logger, stage: u8, epoch: usize, step: usize, r: &LossReport) -> Result<()> {
    log(&LogRow { stage, epoch, step, component: "total".into(), value: r.total })?;
    for c in &r.components {
        log(&LogRow { stage, epoch, step, component: c.name.clone(), value: c.value })?;
    }
    Ok(())
}

/// Deterministic train/validation split of sample indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "validation-split", 0));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if n > 1 { n_val.min(n - 1) } else { 0 };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Prior outputs for a fixed sample list, computed once.
pub struct PriorCache {
    coarse: Vec<Tensor>,
    features: Vec<FeaturePyramid>,
}

impl PriorCache {
    pub fn build(models: &Models, samples: &[DatasetSample], chunk: usize) -> Result<Self> {
        let mut coarse = Vec::with_capacity(samples.len());
        let mut features = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let images: Vec<_> = part.iter().map(|s| &s.image).collect();
            let out = models.prior.segment(&images)?;
            for i in 0..part.len() {
                coarse.push(out.coarse.narrow(0, i, 1)?.to_dtype(DType::F32)?);
                features.push(FeaturePyramid::new(
                    out.features.levels().iter().map(|l| l.narrow(0, i, 1)).collect::<candle_core::Result<_>>()?,
                )?);
            }
        }
        Ok(Self { coarse, features })
    }
}

/// Tensors for one mini-batch.
pub struct Batch {
    pub x: Tensor,
    pub gt: Tensor,
    pub coarse: Tensor,
    pub features: FeaturePyramid,
}

impl Batch {
    pub fn gather(samples: &[DatasetSample], cache: &PriorCache, idx: &[usize], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let x = stack_images(idx.iter().map(|&i| &samples[i].image), dtype, &dev)?;
        let gt = stack_maps(idx.iter().map(|&i| samples[i].mask.grid()), dtype, &dev)?;
        let coarse = Tensor::cat(&idx.iter().map(|&i| cache.coarse[i].clone()).collect::<Vec<_>>(), 0)?.to_dtype(dtype)?;
        let parts: Vec<FeaturePyramid> = idx.iter().map(|&i| cache.features[i].clone()).collect();
        let features = FeaturePyramid::cat(&parts)?;
        let features = FeaturePyramid::new(features.levels().iter().map(|l| l.to_dtype(dtype)).collect::<candle_core::Result<_>>()?)?;
        Ok(Self { x, gt, coarse, features })
    }
}

/// Forward-noised batch under the ground-truth uncertainty.
pub struct NoisyBatch {
    pub ts: Vec<usize>,
    pub uncertainty: Tensor,
    pub y0: Tensor,
    pub masked: Tensor,
    pub y_t: Tensor,
    pub cond: Tensor,
}

/// Draws `t ~ U{1..T}` and a binary `y_t` for every sample, with `U = U_GT`.
pub fn noisy_batch(models: &Models, batch: &Batch, rng: &mut Rng) -> Result<NoisyBatch> {
    let s = &models.schedule;
    let (b, _, h, w) = batch.gt.dims4()?;
    let dtype = batch.gt.dtype();
    let dev = batch.gt.device();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=s.steps())).collect();
    let uncertainty = (&batch.coarse - &batch.gt)?.abs()?;
    let y0 = (&uncertainty * &batch.gt)?;
    let masked = (&uncertainty * &batch.coarse)?;
    let ab = ts.iter().map(|&t| s.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let ab = per_sample(&ab, dtype, dev)?;
    // Binary latents drawn from the closed-form marginal, the same kind of
    // state the reverse chain produces. With fractional y0 the XOR form would
    // give fractional latents that never occur at inference.
    let p_t = (ab.broadcast_mul(&y0)? + ab.affine(-1.0, 1.0)?.broadcast_mul(&masked)?)?;
    let uniform: Vec<f64> = (0..b * h * w).map(|_| rng.random::<f64>()).collect();
    let uniform = Tensor::from_vec(uniform, (b, 1, h, w), dev)?.to_dtype(dtype)?;
    let y_t = uniform.lt(&p_t)?.to_dtype(dtype)?;
    let cond = match models.denoiser.config().conditioning {
        Conditioning::Masked => masked.clone(),
        Conditioning::Raw => batch.coarse.clone(),
    };
    Ok(NoisyBatch { ts, uncertainty, y0, masked, y_t, cond })
}

/// Diffusion objective for a given noise prediction.
pub fn diffusion_objective(models: &Models, batch: &Batch, noisy: &NoisyBatch, eps_hat: &Tensor) -> Result<(Tensor, LossReport)> {
    let support = noisy.uncertainty.gt(0.0)?.to_dtype(eps_hat.dtype())?;
    let eps_hat = (eps_hat * support)?;
    let y0_hat = (&noisy.y_t - &eps_hat)?.abs()?;
    let refined = (&y0_hat + (1.0 - &noisy.uncertainty)?.mul(&batch.coarse)?)?.clamp(0.0, 1.0)?;
    let (a, abp) = posterior_coefficients(&models.schedule, &noisy.ts, eps_hat.dtype(), eps_hat.device())?;
    let q = posterior(&a, &abp, &noisy.y_t, &noisy.y0, &noisy.masked)?;
    let p = posterior(&a, &abp, &noisy.y_t, &y0_hat, &noisy.masked)?;
    diffusion_loss(&q, &p, &refined, &batch.gt)
}

/// Loss of one denoiser training step (no parameter update).
pub fn denoiser_loss(models: &Models, batch: &Batch, rng: &mut Rng) -> Result<(Tensor, LossReport)> {
    let noisy = noisy_batch(models, batch, rng)?;
    let eps_hat = models.denoiser.predict_noise(&batch.x, &noisy.cond, &noisy.y_t, &noisy.ts, &batch.features)?;
    diffusion_objective(models, batch, &noisy, &eps_hat)
}

/// Loss of one uncertainty-network step against `|M_c − M_GT|`.
pub fn huqnet_step_loss(
    models: &Models,
    batch: &Batch,
    mode: &mut Mode,
    bnn_rng: &mut Rng,
    eta: f64,
) -> Result<(Tensor, LossReport)> {
    let target = (&batch.coarse - &batch.gt)?.abs()?;
    let out = models.huqnet.estimate(&batch.x, &batch.coarse, mode, bnn_rng)?;
    huqnet_loss(&out.fused, &target, &out.sample_logits, &batch.gt, &out.mu, &out.sigma, eta)
}

/// AdamW per parameter group with polynomial learning-rate decay.
pub struct GroupOptimizer {
    groups: Vec<(AdamW, f64)>,
    total_steps: usize,
    step: usize,
    power: f64,
}

impl GroupOptimizer {
    pub fn new(groups: Vec<(Vec<Var>, f64)>, weight_decay: f64, power: f64, total_steps: usize) -> Result<Self> {
        let groups = groups
            .into_iter()
            .filter(|(v, _)| !v.is_empty())
            .map(|(vars, lr)| Ok((AdamW::new(vars, ParamsAdamW { lr, weight_decay, ..Default::default() })?, lr)))
            .collect::<Result<_>>()?;
        Ok(Self { groups, total_steps: total_steps.max(1), step: 0, power })
    }

    pub fn lr_factor(&self) -> f64 {
        (1.0 - self.step as f64 / self.total_steps as f64).max(0.0).powf(self.power)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let f = self.lr_factor();
        for (opt, lr) in &mut self.groups {
            opt.set_learning_rate(*lr * f);
            opt.step(grads)?;
        }
        self.step += 1;
        Ok(())
    }
}

fn huqnet_optimizer(store: &ParamStore, cfg: &RunConfig, total_steps: usize) -> Result<GroupOptimizer> {
    let t = &cfg.train;
    GroupOptimizer::new(
        vec![
            (store.vars(&[HuqNet::BACKBONE]), t.lr_backbone),
            (store.vars(&[HuqNet::BNN]), t.lr_bnn),
            (store.vars_excluding(&[HuqNet::BACKBONE, HuqNet::BNN]), t.lr_huqnet),
        ],
        t.weight_decay,
        t.decay_power,
        total_steps,
    )
}

/// Outcome of one stage, including the freeze checksums.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_mae: Option<f64>,
    pub last_loss: f64,
    pub prior_checksum: (u64, u64),
    pub huqnet_checksum: (u64, u64),
    pub denoiser_checksum: (u64, u64),
}

struct Checksums {
    prior: u64,
    huqnet: u64,
    denoiser: u64,
}

impl Checksums {
    fn of(models: &Models) -> Result<Self> {
        Ok(Self { prior: models.prior.checksum()?, huqnet: models.huqnet_store.checksum()?, denoiser: models.denoiser_store.checksum()? })
    }
}

fn finish(models: &Models, stage: u8, before: Checksums, progress: Progress) -> Result<StageReport> {
    let after = Checksums::of(models)?;
    if before.prior != after.prior {
        return Err(Error::Numerical(format!("prior segmenter changed during stage {stage}")));
    }
    Ok(StageReport {
        stage,
        epochs_run: progress.epochs,
        steps: progress.steps,
        best_epoch: progress.best.map(|b| b.0),
        best_validation_mae: progress.best.map(|b| b.1),
        last_loss: progress.last_loss,
        prior_checksum: (before.prior, after.prior),
        huqnet_checksum: (before.huqnet, after.huqnet),
        denoiser_checksum: (before.denoiser, after.denoiser),
    })
}

#[derive(Default)]
struct Progress {
    epochs: usize,
    steps: usize,
    best: Option<(usize, f64)>,
    last_loss: f64,
}

fn check_finite(stage: u8, epoch: usize, step: usize, report: &LossReport, extra: &str) -> Result<()> {
    if report.is_finite() {
        return Ok(());
    }
    Err(Error::Numerical(format!("non-finite loss in stage {stage}, epoch {epoch}, step {step}: {report:?} {extra}")))
}

/// Training and validation samples for the staged procedure.
pub struct TrainingData<'a> {
    pub samples: &'a [DatasetSample],
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub cache: PriorCache,
}

impl<'a> TrainingData<'a> {
    pub fn new(models: &Models, samples: &'a [DatasetSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let t = &models.config.train;
        let (train, validation) = split_validation(samples.len(), t.validation_fraction, t.seed);
        let cache = PriorCache::build(models, samples, t.batch_size)?;
        Ok(Self { samples, train, validation, cache })
    }

    fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order = self.train.clone();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size.max(1))
    }
}

/// Mean refined MAE on the validation split with the current networks.
pub fn validation_mae(models: &Models, data: &TrainingData, epoch: usize) -> Result<Option<f64>> {
    if data.validation.is_empty() {
        return Ok(None);
    }
    let t = &models.config.train;
    let icfg = InferenceConfig {
        steps: t.validation_steps,
        seed: derive_seed(t.seed, "validation", epoch as u64),
        ..models.config.inference.clone()
    };
    let inputs: Vec<RefineInput> = data
        .validation
        .iter()
        .map(|&i| {
            let s = &data.samples[i];
            RefineInput { id: &s.id, image: &s.image, coarse: None, gt: Some(&s.mask) }
        })
        .collect();
    let recs = refine_all(models, &inputs, &icfg, UncertaintySource::Model, false)?;
    let n = recs.len() as f64;
    Ok(Some(recs.iter().map(|r| r.refined_metrics.map_or(0.0, |m| m.mae)).sum::<f64>() / n))
}

fn run_huqnet_epochs(
    models: &Models,
    data: &TrainingData,
    stage: u8,
    epochs: usize,
    early_stopping: bool,
    log: Logger,
) -> Result<Progress> {
    let cfg = &models.config;
    let t = &cfg.train;
    let mut opt = huqnet_optimizer(&models.huqnet_store, cfg, epochs * data.batches_per_epoch(t.batch_size))?;
    let mut progress = Progress::default();
    let mut best_snapshot = None;
    let mut since_best = 0;
    let dtype = models.huqnet_store.dtype();
    for epoch in 0..epochs {
        let mut order_rng = rng_for(t.seed, &format!("stage{stage}-order"), epoch as u64);
        for idx in data.batches(t.batch_size, &mut order_rng) {
            let batch = Batch::gather(data.samples, &data.cache, &idx, dtype)?;
            let mut drop_rng = rng_for(t.seed, &format!("stage{stage}-dropout"), progress.steps as u64);
            let mut bnn_rng = rng_for(t.seed, &format!("stage{stage}-bnn"), progress.steps as u64);
            let (loss, report) = huqnet_step_loss(models, &batch, &mut Mode::Train(&mut drop_rng), &mut bnn_rng, t.bnn_kl_weight)?;
            check_finite(stage, epoch, progress.steps, &report, &format!("batch {idx:?}"))?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
            log_report(log, stage, epoch, progress.steps, &report)?;
            progress.last_loss = report.total;
            progress.steps += 1;
        }
        progress.epochs = epoch + 1;
        if early_stopping {
            if let Some(v) = validation_mae(models, data, epoch)? {
                log(&LogRow { stage, epoch, step: progress.steps, component: "val_refined_mae".into(), value: v })?;
                if progress.best.is_none_or(|(_, b)| v < b) {
                    progress.best = Some((epoch, v));
                    best_snapshot = Some(models.huqnet_store.snapshot()?);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= t.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some(s) = best_snapshot {
        models.huqnet_store.restore(&s)?;
    }
    Ok(progress)
}

/// Stage 1: uncertainty network against `|f(x) − M_GT|`, prior frozen.
pub fn train_stage1_huqnet(models: &Models, data: &TrainingData, log: Logger) -> Result<StageReport> {
    let before = Checksums::of(models)?;
    let progress = run_huqnet_epochs(models, data, 1, models.config.train.huqnet_epochs, false, log)?;
    finish(models, 1, before, progress)
}

/// Stage 2: denoiser with `U = U_GT`, prior and uncertainty network frozen,
/// early stopping on validation refined MAE.
pub fn train_stage2_denoiser(models: &Models, data: &TrainingData, log: Logger) -> Result<StageReport> {
    let before = Checksums::of(models)?;
    let t = &models.config.train;
    let epochs = t.denoiser_max_epochs;
    let mut opt = GroupOptimizer::new(
        vec![(models.denoiser_store.vars(&[]), t.lr_denoiser)],
        t.weight_decay,
        t.decay_power,
        epochs * data.batches_per_epoch(t.batch_size),
    )?;
    let dtype = models.denoiser_store.dtype();
    let mut progress = Progress::default();
    let mut best_snapshot = None;
    let mut since_best = 0;
    for epoch in 0..epochs {
        let mut order_rng = rng_for(t.seed, "stage2-order", epoch as u64);
        for idx in data.batches(t.batch_size, &mut order_rng) {
            let batch = Batch::gather(data.samples, &data.cache, &idx, dtype)?;
            let mut rng = rng_for(t.seed, "stage2-noise", progress.steps as u64);
            let (loss, report) = denoiser_loss(models, &batch, &mut rng)?;
            check_finite(2, epoch, progress.steps, &report, &format!("batch {idx:?}"))?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
            log_report(log, 2, epoch, progress.steps, &report)?;
            progress.last_loss = report.total;
            progress.steps += 1;
        }
        progress.epochs = epoch + 1;
        if let Some(v) = validation_mae(models, data, epoch)? {
            log(&LogRow { stage: 2, epoch, step: progress.steps, component: "val_refined_mae".into(), value: v })?;
            if progress.best.is_none_or(|(_, b)| v < b) {
                progress.best = Some((epoch, v));
                best_snapshot = Some(models.denoiser_store.snapshot()?);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= t.patience {
                    break;
                }
            }
        }
    }
    if let Some(s) = best_snapshot {
        models.denoiser_store.restore(&s)?;
    }
    finish(models, 2, before, progress)
}

/// Stage 3: fine-tune the uncertainty network with the denoiser frozen,
/// early stopping on validation refined MAE.
pub fn train_stage3_finetune_huqnet(models: &Models, data: &TrainingData, log: Logger) -> Result<StageReport> {
    let before = Checksums::of(models)?;
    let progress = run_huqnet_epochs(models, data, 3, models.config.train.finetune_max_epochs, true, log)?;
    finish(models, 3, before, progress)
}

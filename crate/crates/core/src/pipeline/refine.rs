//! Inference: coarse mask → uncertainty → masked reverse diffusion →
//! recomposed mask.

use super::config::{InferenceConfig, Sampler};
use super::models::Models;
use crate::diffusion::{
    compose_refined_mask, ddim_reverse_step, ddim_transitions, ddpm_reverse_step, mask_residual, select_ddim_subsequence,
};
use crate::error::{Error, Result};
use crate::grid::{stack_images, stack_maps, unstack_maps, BinaryMap, Grid, Image, ProbMap, UncertaintyMap};
use crate::metrics::MetricRow;
use crate::nn::{Conditioning, Mode};
use crate::prior::uncertainty_gt;
use crate::rng::{rng_for, Rng};
use candle_core::{DType, Device, Tensor};
use rand::Rng as _;

/// Where the uncertainty map used at inference comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintySource {
    /// The trained uncertainty network.
    #[default]
    Model,
    /// `Û ≡ 0`: refinement must return the coarse mask unchanged.
    Zero,
    /// `|M_c − M_GT|`, needs ground truth.
    GroundTruth,
}

/// Everything produced while refining one image.
#[derive(Debug, Clone)]
pub struct RefinementRecord {
    pub id: String,
    pub coarse: ProbMap,
    pub uncertainty: UncertaintyMap,
    /// Entropy of the coarse mask, present when the model estimated `Û`.
    pub entropy: Option<UncertaintyMap>,
    /// `(t, y_t)` after each transition, when tracing.
    pub trace: Vec<(usize, BinaryMap)>,
    pub y0_hat: ProbMap,
    pub refined: ProbMap,
    pub coarse_metrics: Option<MetricRow>,
    pub refined_metrics: Option<MetricRow>,
}

/// One image to refine.
pub struct RefineInput<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    /// Overrides the prior's coarse mask.
    pub coarse: Option<&'a ProbMap>,
    pub gt: Option<&'a BinaryMap>,
}

fn sample_initial(p: &ProbMap, rng: &mut Rng) -> ProbMap {
    ProbMap::from_fn(p.height(), p.width(), |r, c| if rng.random::<f64>() < p.get(r, c) { 1.0 } else { 0.0 })
}

/// Zeroes `ε̂` outside the support of `U`.
fn restrict(eps: &Grid, u: &UncertaintyMap) -> ProbMap {
    ProbMap::from_fn(eps.height(), eps.width(), |r, c| if u.get(r, c) > 0.0 { eps.get(r, c) } else { 0.0 })
}

/// Refines a batch with the masked reverse process.
pub fn refine_batch(
    models: &Models,
    inputs: &[RefineInput],
    icfg: &InferenceConfig,
    source: UncertaintySource,
    trace: bool,
) -> Result<Vec<RefinementRecord>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let schedule = &models.schedule;
    icfg.validate(schedule.steps())?;
    let images: Vec<&Image> = inputs.iter().map(|i| i.image).collect();
    let dev = Device::Cpu;
    let (coarse_t, features) = if inputs.iter().all(|i| i.coarse.is_some()) {
        let c = stack_maps(inputs.iter().map(|i| i.coarse.unwrap().grid()), DType::F32, &dev)?;
        let f = models.prior.features(&images, &c)?;
        (c, f)
    } else if inputs.iter().all(|i| i.coarse.is_none()) {
        let out = models.prior.segment(&images)?;
        (out.coarse, out.features)
    } else {
        return Err(Error::InvalidArgument("either all or none of a batch may carry coarse masks".into()));
    };
    let coarse: Vec<ProbMap> = unstack_maps(&coarse_t)?.into_iter().map(ProbMap::from_grid).collect();
    let x = stack_images(images.iter().copied(), DType::F32, &dev)?;

    let (uncertainty, entropy): (Vec<UncertaintyMap>, Option<Vec<UncertaintyMap>>) = match source {
        UncertaintySource::Model => {
            let mut bnn_rng = rng_for(icfg.seed, "bnn", images[0].fingerprint());
            let bundle = models.huqnet.estimate(&x, &coarse_t, &mut Mode::Eval, &mut bnn_rng)?;
            let u = bundle.fused_maps()?;
            let e = unstack_maps(&bundle.entropy)?.into_iter().map(UncertaintyMap::from_grid).collect();
            (u, Some(e))
        }
        UncertaintySource::Zero => (coarse.iter().map(|c| UncertaintyMap::zeros(c.height(), c.width())).collect(), None),
        UncertaintySource::GroundTruth => {
            let u = inputs
                .iter()
                .zip(&coarse)
                .map(|(i, c)| {
                    let gt = i.gt.ok_or_else(|| Error::InvalidArgument("ground-truth uncertainty needs masks".into()))?;
                    uncertainty_gt(c, gt)
                })
                .collect::<Result<Vec<_>>>()?;
            (u, None)
        }
    };

    let masked: Vec<ProbMap> = uncertainty.iter().zip(&coarse).map(|(u, c)| mask_residual(u, c)).collect::<Result<_>>()?;
    let cond_maps: Vec<&Grid> = match models.denoiser.config().conditioning {
        Conditioning::Masked => masked.iter().map(|m| m.grid()).collect(),
        Conditioning::Raw => coarse.iter().map(|m| m.grid()).collect(),
    };
    let cond = stack_maps(cond_maps, DType::F32, &dev)?;

    let mut rngs: Vec<Rng> = images.iter().map(|im| rng_for(icfg.seed, "refine", im.fingerprint())).collect();
    let mut latents: Vec<ProbMap> = masked.iter().zip(rngs.iter_mut()).map(|(m, r)| sample_initial(m, r)).collect();
    let transitions: Vec<(usize, usize)> = match icfg.sampler {
        Sampler::Ddim => ddim_transitions(&select_ddim_subsequence(schedule.steps(), icfg.steps)?),
        Sampler::Ddpm => (1..=schedule.steps()).rev().map(|t| (t, t - 1)).collect(),
    };
    let b = inputs.len();
    let mut traces: Vec<Vec<(usize, BinaryMap)>> = vec![Vec::new(); b];
    let mut y0_last: Vec<ProbMap> = coarse.iter().map(|c| ProbMap::zeros(c.height(), c.width())).collect();
    for &(t_hi, t_lo) in &transitions {
        let y_t = stack_maps(latents.iter().map(|l| l.grid()), DType::F32, &dev)?;
        let eps = models.denoiser.predict_noise(&x, &cond, &y_t, &vec![t_hi; b], &features)?.detach();
        let eps = unstack_maps(&eps)?;
        for i in 0..b {
            let e = restrict(&eps[i], &uncertainty[i]);
            let next = match icfg.sampler {
                Sampler::Ddim => {
                    y0_last[i] = ProbMap::from_grid(latents[i].grid().zip_map(e.grid(), crate::diffusion::xor)?);
                    ddim_reverse_step(schedule, t_hi, t_lo, &latents[i], &e, &masked[i], icfg.sigma_rule, &mut rngs[i])?
                }
                Sampler::Ddpm => {
                    let step = ddpm_reverse_step(schedule, t_hi, &latents[i], &e, &masked[i], &mut rngs[i])?;
                    y0_last[i] = step.y0_hat;
                    step.y_prev
                }
            };
            if trace {
                traces[i].push((t_lo, next.clone()));
            }
            latents[i] = next.to_prob();
        }
    }

    let mut out = Vec::with_capacity(b);
    for (i, input) in inputs.iter().enumerate() {
        let refined = compose_refined_mask(&y0_last[i], &uncertainty[i], &coarse[i])?;
        let (cm, rm) = match input.gt {
            Some(gt) => (Some(MetricRow::of(&coarse[i], gt)?), Some(MetricRow::of(&refined, gt)?)),
            None => (None, None),
        };
        out.push(RefinementRecord {
            id: input.id.to_string(),
            coarse: coarse[i].clone(),
            uncertainty: uncertainty[i].clone(),
            entropy: entropy.as_ref().map(|e| e[i].clone()),
            trace: std::mem::take(&mut traces[i]),
            y0_hat: y0_last[i].clone(),
            refined,
            coarse_metrics: cm,
            refined_metrics: rm,
        });
    }
    Ok(out)
}

/// Refines a list of inputs in batches of `icfg.batch_size`.
pub fn refine_all(
    models: &Models,
    inputs: &[RefineInput],
    icfg: &InferenceConfig,
    source: UncertaintySource,
    trace: bool,
) -> Result<Vec<RefinementRecord>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(icfg.batch_size.max(1)) {
        out.extend(refine_batch(models, chunk, icfg, source, trace)?);
    }
    Ok(out)
}

/// `[B, 1, H, W]` tensor of a list of maps, helper for callers.
pub fn maps_tensor(maps: &[&Grid]) -> Result<Tensor> {
    stack_maps(maps.iter().copied(), DType::F32, &Device::Cpu)
}

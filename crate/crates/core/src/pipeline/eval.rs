//! Corpus evaluation, seed averaging and the sampling-step ablation.

use super::config::InferenceConfig;
use super::models::Models;
use super::refine::{refine_all, RefineInput, RefinementRecord, UncertaintySource};
use crate::datagen::DatasetSample;
use crate::error::{Error, Result};
use crate::metrics::MetricRow;
use crate::prior::uncertainty_gt;
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// One row of `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub segmenter: String,
    pub refined: bool,
    #[serde(rename = "T_infer")]
    pub t_infer: usize,
    pub mae: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
    pub n: usize,
}

impl EvalRow {
    pub fn new(segmenter: &str, refined: bool, t_infer: usize, m: &MetricRow) -> Self {
        Self {
            segmenter: segmenter.to_string(),
            refined,
            t_infer,
            mae: m.mae,
            f_beta_w: m.f_beta_w,
            e_phi: m.e_phi,
            s_alpha: m.s_alpha,
            n: m.sample_count,
        }
    }
}

/// Per-image, per-seed metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub seed_index: usize,
    pub coarse_mae: f64,
    pub coarse_f_beta_w: f64,
    pub coarse_e_phi: f64,
    pub coarse_s_alpha: f64,
    pub refined_mae: f64,
    pub refined_f_beta_w: f64,
    pub refined_e_phi: f64,
    pub refined_s_alpha: f64,
}

/// Mean per-pixel L1 distance of two uncertainty estimates to `U_GT`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyQuality {
    pub model_l1: f64,
    pub entropy_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub coarse: MetricRow,
    /// Mean over seeds of the corpus-mean refined metrics.
    pub refined: MetricRow,
    pub refined_per_seed: Vec<MetricRow>,
    pub samples: Vec<SampleRow>,
    pub uncertainty: Option<UncertaintyQuality>,
}

impl EvalOutcome {
    pub fn rows(&self, segmenter: &str, t_infer: usize) -> Vec<EvalRow> {
        vec![EvalRow::new(segmenter, false, 0, &self.coarse), EvalRow::new(segmenter, true, t_infer, &self.refined)]
    }
}

fn inputs(samples: &[DatasetSample]) -> Vec<RefineInput<'_>> {
    samples.iter().map(|s| RefineInput { id: &s.id, image: &s.image, coarse: None, gt: Some(&s.mask) }).collect()
}

fn metrics_of(recs: &[RefinementRecord], refined: bool) -> Result<Vec<MetricRow>> {
    recs.iter()
        .map(|r| {
            let m = if refined { r.refined_metrics } else { r.coarse_metrics };
            m.ok_or_else(|| Error::InvalidArgument(format!("no metrics for {}", r.id)))
        })
        .collect()
}

fn uncertainty_quality(recs: &[RefinementRecord], samples: &[DatasetSample]) -> Result<Option<UncertaintyQuality>> {
    let mut model = 0.0;
    let mut entropy = 0.0;
    let mut n = 0usize;
    for (r, s) in recs.iter().zip(samples) {
        let Some(e) = &r.entropy else { return Ok(None) };
        let target = uncertainty_gt(&r.coarse, &s.mask)?;
        for ((u, e), g) in r.uncertainty.as_slice().iter().zip(e.as_slice()).zip(target.as_slice()) {
            model += (u - g).abs();
            entropy += (e - g).abs();
        }
        n += target.as_slice().len();
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(UncertaintyQuality { model_l1: model / n as f64, entropy_l1: entropy / n as f64 }))
}

/// Refines every sample under `seeds` derived sampling seeds and averages.
pub fn evaluate_corpus(
    models: &Models,
    samples: &[DatasetSample],
    icfg: &InferenceConfig,
    seeds: usize,
    source: UncertaintySource,
) -> Result<EvalOutcome> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("at least one evaluation seed is required".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let inputs = inputs(samples);
    let mut coarse = None;
    let mut refined_per_seed = Vec::with_capacity(seeds);
    let mut rows = Vec::new();
    let mut uncertainty = None;
    for k in 0..seeds {
        let cfg = InferenceConfig { seed: derive_seed(icfg.seed, "eval", k as u64), ..icfg.clone() };
        let recs = refine_all(models, &inputs, &cfg, source, false)?;
        let c = metrics_of(&recs, false)?;
        let r = metrics_of(&recs, true)?;
        if k == 0 {
            coarse = Some(MetricRow::mean(&c));
            uncertainty = uncertainty_quality(&recs, samples)?;
        }
        refined_per_seed.push(MetricRow::mean(&r));
        for ((rec, c), r) in recs.iter().zip(&c).zip(&r) {
            rows.push(SampleRow {
                id: rec.id.clone(),
                seed_index: k,
                coarse_mae: c.mae,
                coarse_f_beta_w: c.f_beta_w,
                coarse_e_phi: c.e_phi,
                coarse_s_alpha: c.s_alpha,
                refined_mae: r.mae,
                refined_f_beta_w: r.f_beta_w,
                refined_e_phi: r.e_phi,
                refined_s_alpha: r.s_alpha,
            });
        }
    }
    let mut refined = MetricRow::mean(&refined_per_seed);
    refined.sample_count = samples.len();
    Ok(EvalOutcome { coarse: coarse.unwrap_or_default(), refined, refined_per_seed, samples: rows, uncertainty })
}

/// One column of the step ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "T_infer")]
    pub t_infer: usize,
    pub mae: f64,
    pub f_beta_w: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
    pub n: usize,
    pub seconds_per_image: f64,
}

/// Refined metrics and wall-clock per image for each step count.
pub fn ablate_steps(
    models: &Models,
    samples: &[DatasetSample],
    icfg: &InferenceConfig,
    steps: &[usize],
    seeds: usize,
) -> Result<Vec<AblationRow>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let inputs = inputs(samples);
    let mut out = Vec::with_capacity(steps.len());
    for &t in steps {
        let mut per_seed = Vec::new();
        let mut elapsed = 0.0;
        for k in 0..seeds.max(1) {
            let cfg = InferenceConfig { steps: t, seed: derive_seed(icfg.seed, "eval", k as u64), ..icfg.clone() };
            let start = Instant::now();
            let recs = refine_all(models, &inputs, &cfg, UncertaintySource::Model, false)?;
            elapsed += start.elapsed().as_secs_f64();
            per_seed.push(MetricRow::mean(&metrics_of(&recs, true)?));
        }
        let m = MetricRow::mean(&per_seed);
        out.push(AblationRow {
            t_infer: t,
            mae: m.mae,
            f_beta_w: m.f_beta_w,
            e_phi: m.e_phi,
            s_alpha: m.s_alpha,
            n: samples.len(),
            seconds_per_image: elapsed / (samples.len() * seeds.max(1)) as f64,
        });
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

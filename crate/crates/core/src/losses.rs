//! Training objectives over `[B, 1, H, W]` tensors. Every loss returns a
//! differentiable scalar tensor; [`LossReport`] collects detached values.

use crate::error::{Error, Result};
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

/// Clamp applied to Bernoulli parameters before taking logs.
pub const PROB_CLAMP: f64 = 1e-6;
/// Weight of the latent KL term in the BNN loss.
pub const DEFAULT_BNN_KL_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<LossTerm>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.value).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|c| c.value.is_finite())
    }

    fn push(&mut self, name: &str, t: &Tensor, weight: f64) -> Result<()> {
        let value = scalar(t)?;
        self.components.push(LossTerm { name: name.to_string(), value, weight });
        self.total += weight * value;
        Ok(())
    }

    /// Mean of reports with the same component layout.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let Some(first) = reports.first() else { return LossReport::default() };
        let n = reports.len() as f64;
        let components = first
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| LossTerm {
                name: c.name.clone(),
                value: reports.iter().map(|r| r.components.get(i).map_or(0.0, |x| x.value)).sum::<f64>() / n,
                weight: c.weight,
            })
            .collect();
        LossReport { total: reports.iter().map(|r| r.total).sum::<f64>() / n, components }
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dims(format!("{:?}", a.dims()), b.dims()));
    }
    Ok(())
}

/// Per-sample sums over all but the batch dimension, `[B]`.
fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

/// Mean Bernoulli KL divergence `KL(B(q) ‖ B(p))` per pixel.
pub fn kl_bernoulli(q: &Tensor, p: &Tensor) -> Result<Tensor> {
    check_same(q, p)?;
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q1 = (1.0 - &q)?;
    let p1 = (1.0 - &p)?;
    let kl = ((&q * (q.log()? - p.log()?)?)? + (&q1 * (q1.log()? - p1.log()?)?)?)?;
    Ok(kl.mean_all()?)
}

/// Boundary-emphasis weights `1 + 5·|avgpool₃₁(gt) − gt|` (zero padding,
/// padded cells counted).
pub fn boundary_weights(gt: &Tensor) -> Result<Tensor> {
    let k = 31;
    let pad = k / 2;
    let padded = gt.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let pooled = padded.avg_pool2d_with_stride((k, k), (1, 1))?;
    let w = (((pooled - gt)?.abs()? * 5.0)? + 1.0)?;
    Ok(w.detach())
}

fn bce_elementwise(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let p = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let pos = (gt * p.log()?)?;
    let neg = ((1.0 - gt)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// Binary cross entropy on probabilities, averaged over pixels and batch.
pub fn bce(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    Ok(bce_elementwise(pred, gt)?.mean_all()?)
}

/// BCE on logits, numerically stable.
pub fn bce_with_logits(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(logits, gt)?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * gt)?)? + soft)?.mean_all()?)
}

/// `Σ w·BCE / Σ w` per sample, averaged over the batch.
pub fn weighted_bce(pred: &Tensor, gt: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    check_same(pred, w)?;
    let num = per_sample_sum(&(bce_elementwise(pred, gt)? * w)?)?;
    Ok((num / per_sample_sum(w)?)?.mean_all()?)
}

/// `1 − (Σ w·p·g + 1) / (Σ w·(p + g) − Σ w·p·g + 1)` per sample, averaged.
pub fn weighted_iou(pred: &Tensor, gt: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    check_same(pred, w)?;
    let inter = per_sample_sum(&((pred * gt)? * w)?)?;
    let union = per_sample_sum(&((pred + gt)? * w)?)?;
    let iou = ((&inter + 1.0)? / ((union - &inter)? + 1.0)?)?;
    Ok((1.0 - iou)?.mean_all()?)
}

/// `1 − (2Σpg + 1)/(Σp + Σg + 1)` per sample, averaged.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same(pred, gt)?;
    let inter = per_sample_sum(&(pred * gt)?)?;
    let denom = ((per_sample_sum(pred)? + per_sample_sum(gt)?)? + 1.0)?;
    Ok((1.0 - ((inter * 2.0)? + 1.0)?.div(&denom)?)?.mean_all()?)
}

/// `½·mean(σ² + μ² − 1 − log σ²)`, the KL of `N(μ, σ²)` from `N(0, 1)`.
pub fn gaussian_kl(mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    check_same(mu, sigma)?;
    let var = sigma.sqr()?;
    let log_var = var.clamp(1e-12, f64::INFINITY)?.log()?;
    Ok(((((var + mu.sqr()?)? - 1.0)? - log_var)?.mean_all()? * 0.5)?)
}

/// Diffusion objective: KL between the true and predicted posteriors plus
/// boundary-weighted IoU and BCE on the recomposed mask.
pub fn diffusion_loss(q_post: &Tensor, p_post: &Tensor, refined: &Tensor, gt: &Tensor) -> Result<(Tensor, LossReport)> {
    let w = boundary_weights(gt)?;
    let kl = kl_bernoulli(q_post, p_post)?;
    let wiou = weighted_iou(refined, gt, &w)?;
    let wbce = weighted_bce(refined, gt, &w)?;
    let mut report = LossReport::default();
    report.push("kl", &kl, 1.0)?;
    report.push("wiou", &wiou, 1.0)?;
    report.push("wbce", &wbce, 1.0)?;
    Ok((((kl + wiou)? + wbce)?, report))
}

/// Reconstruction BCE of one latent draw plus `η`-weighted Gaussian KL.
pub fn bnn_loss(sample_logits: &Tensor, gt: &Tensor, mu: &Tensor, sigma: &Tensor, eta: f64) -> Result<(Tensor, LossReport)> {
    let rec = bce_with_logits(sample_logits, gt)?;
    let kl = gaussian_kl(mu, sigma)?;
    let mut report = LossReport::default();
    report.push("bnn_bce", &rec, 1.0)?;
    report.push("bnn_kl", &kl, eta)?;
    Ok(((rec + (kl * eta)?)?, report))
}

/// HUQNet objective: BCE and dice of the fused map against the target
/// uncertainty, plus the BNN loss.
pub fn huqnet_loss(
    fused: &Tensor,
    target: &Tensor,
    sample_logits: &Tensor,
    gt: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    eta: f64,
) -> Result<(Tensor, LossReport)> {
    let b = bce(fused, target)?;
    let d = dice_loss(fused, target)?;
    let (bl, br) = bnn_loss(sample_logits, gt, mu, sigma, eta)?;
    let mut report = LossReport::default();
    report.push("huq_bce", &b, 1.0)?;
    report.push("dice", &d, 1.0)?;
    report.components.extend(br.components);
    report.total += br.total;
    Ok((((b + d)? + bl)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_slice(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn kl_values() {
        let q = t(&[0.3, 0.7, 0.5, 0.9], 2, 2);
        assert!(scalar(&kl_bernoulli(&q, &q).unwrap()).unwrap().abs() < 1e-15);
        let one = t(&[1.0; 4], 2, 2);
        let half = t(&[0.5; 4], 2, 2);
        let v = scalar(&kl_bernoulli(&one, &half).unwrap()).unwrap();
        // probabilities are clamped away from 0 and 1
        assert!((v - 2f64.ln()).abs() < 1e-4, "{v}");
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let g = t(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let w = boundary_weights(&g).unwrap();
        assert!(scalar(&weighted_bce(&g, &g, &w).unwrap()).unwrap() < 1e-5);
        assert!(scalar(&weighted_iou(&g, &g, &w).unwrap()).unwrap().abs() < 1e-12);
        assert!(scalar(&dice_loss(&g, &g).unwrap()).unwrap().abs() < 1e-12);
        let inv = (1.0 - &g).unwrap();
        let d = scalar(&dice_loss(&inv, &g).unwrap()).unwrap();
        assert!((d - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn weights_are_at_least_one() {
        let g = Tensor::rand(0f64, 1.0, (2, 1, 40, 35), &Device::Cpu).unwrap().ge(0.5).unwrap().to_dtype(candle_core::DType::F64).unwrap();
        let w = boundary_weights(&g).unwrap();
        assert_eq!(w.dims(), g.dims());
        let min = w.min_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(min >= 1.0);
    }

    #[test]
    fn gaussian_kl_values() {
        let z = t(&[0.0; 4], 2, 2);
        let o = t(&[1.0; 4], 2, 2);
        assert!(scalar(&gaussian_kl(&z, &o).unwrap()).unwrap().abs() < 1e-15);
        assert!((scalar(&gaussian_kl(&o, &o).unwrap()).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_total_matches_weighted_sum() {
        let g = t(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let p = t(&[0.8, 0.3, 0.6, 0.1], 2, 2);
        let (loss, r) = huqnet_loss(&p, &g, &p, &g, &p, &p, 0.1).unwrap();
        assert!((r.total - r.weighted_sum()).abs() < 1e-12);
        assert!((r.total - scalar(&loss).unwrap()).abs() < 1e-12);
        assert_eq!(r.components.len(), 4);
        let (loss, r) = diffusion_loss(&p, &g, &p, &g).unwrap();
        assert!((r.total - scalar(&loss).unwrap()).abs() < 1e-12);
    }
}

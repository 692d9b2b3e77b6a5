use super::kernels::{bernoulli_posterior, xor};
use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::{BinaryMap, ProbMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the DDIM interpolation weight σ is derived from the two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaRule {
    /// σ = (1 − ᾱ_lo)/(1 − ᾱ_hi), always in [0, 1].
    #[default]
    Ratio,
    /// σ = (1 − ᾱ_hi)/(1 − ᾱ_lo), ≥ 1 for any decreasing schedule; clamped.
    Literal,
}

impl SigmaRule {
    pub fn sigma(self, alpha_bar_hi: f64, alpha_bar_lo: f64) -> f64 {
        let (num, den) = match self {
            SigmaRule::Ratio => (1.0 - alpha_bar_lo, 1.0 - alpha_bar_hi),
            SigmaRule::Literal => (1.0 - alpha_bar_hi, 1.0 - alpha_bar_lo),
        };
        if den <= 0.0 {
            return if num <= 0.0 { 0.0 } else { 1.0 };
        }
        (num / den).clamp(0.0, 1.0)
    }
}

/// Evenly spaced network-evaluation steps from `T_train` down to 1, both
/// endpoints included. The chain visits them in order and terminates at 0.
pub fn select_ddim_subsequence(train_steps: usize, infer_steps: usize) -> Result<Vec<usize>> {
    if infer_steps < 1 || infer_steps > train_steps {
        return Err(Error::OutOfRange { what: "T_infer", value: infer_steps, lo: 1, hi: train_steps });
    }
    if infer_steps == 1 {
        return Ok(vec![train_steps]);
    }
    let span = train_steps - 1;
    let last = infer_steps - 1;
    Ok((0..infer_steps).map(|i| 1 + ((last - i) * span) / last).collect())
}

/// `(t_hi, t_lo)` transitions for a sub-sequence, ending with `(t_1, 0)`.
pub fn ddim_transitions(subsequence: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(subsequence.len());
    for (i, &t) in subsequence.iter().enumerate() {
        out.push((t, subsequence.get(i + 1).copied().unwrap_or(0)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct DdpmStep {
    pub y_prev: BinaryMap,
    pub y0_hat: ProbMap,
    pub mu_hat: ProbMap,
}

fn y0_hat(y_t: &ProbMap, eps_hat: &ProbMap) -> Result<ProbMap> {
    Ok(ProbMap::from_grid(y_t.grid().zip_map(eps_hat.grid(), xor)?))
}

fn sample_bernoulli<R: Rng + ?Sized>(theta: &ProbMap, rng: &mut R) -> Result<BinaryMap> {
    let (h, w) = theta.shape();
    let bits = theta.as_slice().iter().map(|&p| rng.random::<f64>() < p).collect();
    BinaryMap::new(h, w, bits)
}

/// One ancestral step: `ŷ_0 = |y_t − ε̂|`, `μ̂ = φ_post(y_t, ŷ_0, M̃_c)`,
/// `y_{t−1} ~ B(μ̂)`.
pub fn ddpm_reverse_step<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    t: usize,
    y_t: &ProbMap,
    eps_hat: &ProbMap,
    mc_tilde: &ProbMap,
    rng: &mut R,
) -> Result<DdpmStep> {
    let y0_hat = y0_hat(y_t, eps_hat)?;
    let mu_hat = bernoulli_posterior(s, t, y_t, &y0_hat, mc_tilde)?;
    let y_prev = sample_bernoulli(&mu_hat, rng)?;
    Ok(DdpmStep { y_prev, y0_hat, mu_hat })
}

/// The three clamped DDIM weights applied to `(y_t, ŷ_0, M̃_c)`.
pub fn ddim_coefficients(s: &NoiseSchedule, t_hi: usize, t_lo: usize, rule: SigmaRule) -> Result<[f64; 3]> {
    if t_hi <= t_lo {
        return Err(Error::InvalidArgument(format!("DDIM step needs t_hi > t_lo, got {t_hi} -> {t_lo}")));
    }
    let ab_hi = s.alpha_bar(t_hi)?;
    let ab_lo = s.alpha_bar(t_lo)?;
    let sigma = rule.sigma(ab_hi, ab_lo);
    Ok([
        sigma,
        (ab_lo - sigma * ab_hi).clamp(0.0, 1.0),
        ((1.0 - ab_lo) - (1.0 - ab_hi) * sigma).clamp(0.0, 1.0),
    ])
}

/// One DDIM transition `t_hi → t_lo`. At `t_lo = 0` the thresholded `ŷ_0`
/// is returned instead of a sample.
#[allow(clippy::too_many_arguments)]
pub fn ddim_reverse_step<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    t_hi: usize,
    t_lo: usize,
    y_t: &ProbMap,
    eps_hat: &ProbMap,
    mc_tilde: &ProbMap,
    rule: SigmaRule,
    rng: &mut R,
) -> Result<BinaryMap> {
    let [c_y, c_x0, c_m] = ddim_coefficients(s, t_hi, t_lo, rule)?;
    let y0_hat = y0_hat(y_t, eps_hat)?;
    y_t.grid().check_same(mc_tilde.grid())?;
    if t_lo == 0 {
        return Ok(BinaryMap::threshold(y0_hat.grid(), 0.5));
    }
    let theta = y_t
        .as_slice()
        .iter()
        .zip(y0_hat.as_slice())
        .zip(mc_tilde.as_slice())
        .map(|((&y, &x0), &m)| (c_y * y + c_x0 * x0 + c_m * m).clamp(0.0, 1.0))
        .collect();
    let theta = ProbMap::new(y_t.height(), y_t.width(), theta)?;
    sample_bernoulli(&theta, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample_forward;
    use crate::rng::seeded;

    #[test]
    fn subsequence_contract() {
        let s = select_ddim_subsequence(1000, 10).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s[0], 1000);
        assert_eq!(*s.last().unwrap(), 1);
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let tr = ddim_transitions(&s);
        assert_eq!(tr.last().unwrap().1, 0);

        let id = select_ddim_subsequence(1000, 1000).unwrap();
        assert_eq!(id, (1..=1000).rev().collect::<Vec<_>>());

        assert_eq!(select_ddim_subsequence(1000, 3).unwrap(), vec![1000, 500, 1]);
        assert_eq!(select_ddim_subsequence(1000, 1).unwrap(), vec![1000]);
        assert!(select_ddim_subsequence(1000, 0).is_err());
        assert!(select_ddim_subsequence(1000, 1001).is_err());
    }

    #[test]
    fn ratio_coefficients_sum_to_one() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        for &(hi, lo) in &[(1000, 889), (500, 1), (2, 1), (1, 0)] {
            let c = ddim_coefficients(&s, hi, lo, SigmaRule::Ratio).unwrap();
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{hi}->{lo}: {c:?}");
        }
        assert!(SigmaRule::Literal.sigma(0.2, 0.5) >= 1.0);
        assert!(ddim_coefficients(&s, 5, 5, SigmaRule::Ratio).is_err());
    }

    #[test]
    fn ddim_fixed_point() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let y = ProbMap::from_fn(6, 6, |r, c| ((r + c) % 2) as f64);
        let zero = ProbMap::zeros(6, 6);
        let mut rng = seeded(1);
        let out = ddim_reverse_step(&s, 900, 500, &y, &zero, &y, SigmaRule::Ratio, &mut rng).unwrap();
        assert_eq!(out.to_prob(), y);
    }

    #[test]
    fn ddim_final_step_thresholds() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let y = ProbMap::from_fn(4, 4, |r, _| r as f64 / 3.0);
        let eps = ProbMap::zeros(4, 4);
        let m = ProbMap::filled(4, 4, 0.9);
        let a = ddim_reverse_step(&s, 10, 0, &y, &eps, &m, SigmaRule::Ratio, &mut seeded(1)).unwrap();
        let b = ddim_reverse_step(&s, 10, 0, &y, &eps, &m, SigmaRule::Ratio, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, BinaryMap::threshold(y.grid(), 0.5));
    }

    #[test]
    fn ddpm_zero_noise_and_true_noise() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let y0 = ProbMap::from_fn(8, 8, |r, c| ((r / 2 + c / 3) % 2) as f64);
        let mc = ProbMap::filled(8, 8, 0.4);
        let mut rng = seeded(5);
        let f = sample_forward(&s, 600, &y0, &mc, &mut rng).unwrap();
        let step = ddpm_reverse_step(&s, 600, &f.y_t, &ProbMap::zeros(8, 8), &mc, &mut rng).unwrap();
        assert_eq!(step.y0_hat, f.y_t);
        let step = ddpm_reverse_step(&s, 600, &f.y_t, &f.epsilon.to_prob(), &mc, &mut rng).unwrap();
        assert_eq!(step.y0_hat, y0);
    }
}

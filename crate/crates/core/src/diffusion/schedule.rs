use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every β.
pub const MAX_BETA: f64 = 0.999;

/// Per-step noise rates. Steps are 1-based: `beta(1)` is the first
/// transition, `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: ᾱ(t) = f(t)/f(0) with
    /// f(t) = cos²(((t/T + s)/(1 + s))·π/2), β_t = 1 − ᾱ_t/ᾱ_{t−1} clipped to
    /// [`MAX_BETA`]. The stored ᾱ is the running product of the clipped α.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let f = |t: f64| {
            let x = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for t in 1..=steps {
            let ab_t = f(t as f64) / f0;
            let ab_prev = f((t - 1) as f64) / f0;
            let b = (1.0 - ab_t / ab_prev).clamp(0.0, MAX_BETA);
            let a = 1.0 - b;
            prod *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(prod);
        }
        Ok(Self { steps, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::OutOfRange { what: "t", value: t, lo: 1, hi: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// ᾱ_t for `0 ≤ t ≤ T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

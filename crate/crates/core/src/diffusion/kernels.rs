use super::NoiseSchedule;
use crate::error::Result;
use crate::grid::{BinaryMap, Grid, ProbMap, UncertaintyMap};
use rand::Rng;

/// Posterior normalizers at or below this value fall back to θ = y_t.
pub const POSTERIOR_EPS: f64 = 1e-12;

/// Generalized exclusive-or `|a − b|`; exact XOR on {0, 1}.
#[inline]
pub fn xor(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// `U ⊙ M`: restrict a mask to the uncertain (residual) region.
pub fn mask_residual(u: &UncertaintyMap, m: &ProbMap) -> Result<ProbMap> {
    Ok(ProbMap::from_grid(u.grid().zip_map(m.grid(), |a, b| a * b)?))
}

/// Closed-form Bernoulli parameter of `q(y_t | y_0, M̃_c)`:
/// `ᾱ_t·y_0 + (1 − ᾱ_t)·M̃_c`.
pub fn forward_marginal_param(s: &NoiseSchedule, t: usize, y0: &ProbMap, mc_tilde: &ProbMap) -> Result<ProbMap> {
    let ab = s.alpha_bar(t)?;
    if t == 0 {
        return Err(crate::Error::OutOfRange { what: "t", value: 0, lo: 1, hi: s.steps() });
    }
    Ok(ProbMap::from_grid(y0.grid().zip_map(mc_tilde.grid(), |y, m| ab * y + (1.0 - ab) * m)?))
}

#[derive(Debug, Clone)]
pub struct ForwardSample {
    pub epsilon: BinaryMap,
    pub y_t: ProbMap,
}

/// Draw `ε ~ B((1 − ᾱ_t)·|M̃_c − y_0|)` per pixel and return `y_t = y_0 ⊕ ε`.
pub fn sample_forward<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    t: usize,
    y0: &ProbMap,
    mc_tilde: &ProbMap,
    rng: &mut R,
) -> Result<ForwardSample> {
    if t == 0 {
        return Err(crate::Error::OutOfRange { what: "t", value: 0, lo: 1, hi: s.steps() });
    }
    let ab = s.alpha_bar(t)?;
    y0.grid().check_same(mc_tilde.grid())?;
    let (h, w) = y0.shape();
    let mut eps = Vec::with_capacity(h * w);
    let mut yt = Vec::with_capacity(h * w);
    for (&y, &m) in y0.as_slice().iter().zip(mc_tilde.as_slice()) {
        let p = ((1.0 - ab) * xor(m, y)).clamp(0.0, 1.0);
        // Draw unconditionally so the stream layout does not depend on p.
        let e = rng.random::<f64>() < p;
        eps.push(e);
        yt.push(xor(y, if e { 1.0 } else { 0.0 }));
    }
    Ok(ForwardSample { epsilon: BinaryMap::new(h, w, eps)?, y_t: ProbMap::new(h, w, yt)? })
}

/// Per-pixel posterior parameter of `q(y_{t−1} = 1 | y_t, y_0, M̃_c)`.
///
/// Likelihood `L = (1 − β_t)·[1 − y_t, y_t] + β_t·|1 − y_t − M̃_c|`, prior
/// `P = ᾱ_{t−1}·[1 − y_0, y_0] + (1 − ᾱ_{t−1})·[1 − M̃_c, M̃_c]`; the result
/// is the channel-1 share of `L ⊙ P`. Takes β_t rather than α_t: for small
/// β, recovering it as 1 − α_t loses about four digits.
#[inline]
pub fn posterior_param(beta_t: f64, alpha_bar_prev: f64, y_t: f64, y0: f64, mc_tilde: f64) -> f64 {
    let shared = beta_t * (1.0 - y_t - mc_tilde).abs();
    let l0 = (1.0 - beta_t) * (1.0 - y_t) + shared;
    let l1 = (1.0 - beta_t) * y_t + shared;
    let p0 = alpha_bar_prev * (1.0 - y0) + (1.0 - alpha_bar_prev) * (1.0 - mc_tilde);
    let p1 = alpha_bar_prev * y0 + (1.0 - alpha_bar_prev) * mc_tilde;
    let n0 = l0 * p0;
    let n1 = l1 * p1;
    let z = n0 + n1;
    if !(z > POSTERIOR_EPS) {
        return y_t.clamp(0.0, 1.0);
    }
    (n1 / z).clamp(0.0, 1.0)
}

/// Bernoulli posterior map `φ_post(y_t, y_0, M̃_c)` at step `t ≥ 1`.
pub fn bernoulli_posterior(
    s: &NoiseSchedule,
    t: usize,
    y_t: &ProbMap,
    y0: &ProbMap,
    mc_tilde: &ProbMap,
) -> Result<ProbMap> {
    if t == 0 {
        return Err(crate::Error::OutOfRange { what: "t", value: 0, lo: 1, hi: s.steps() });
    }
    let b = s.beta(t)?;
    let ab_prev = s.alpha_bar(t - 1)?;
    y_t.grid().check_same(y0.grid())?;
    y_t.grid().check_same(mc_tilde.grid())?;
    let data = y_t
        .as_slice()
        .iter()
        .zip(y0.as_slice())
        .zip(mc_tilde.as_slice())
        .map(|((&yt, &y), &m)| posterior_param(b, ab_prev, yt, y, m))
        .collect();
    ProbMap::new(y_t.height(), y_t.width(), data)
}

/// `M_r = clamp(ŷ_0 + (1 − U) ⊙ M_c, 0, 1)`.
pub fn compose_refined_mask(y0_hat: &ProbMap, u: &UncertaintyMap, mc: &ProbMap) -> Result<ProbMap> {
    y0_hat.grid().check_same(u.grid())?;
    let keep: Grid = u.grid().zip_map(mc.grid(), |u, m| (1.0 - u) * m)?;
    Ok(ProbMap::from_grid(y0_hat.grid().zip_map(&keep, |a, b| a + b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(1000).unwrap()
    }

    #[test]
    fn mask_residual_examples() {
        let m = ProbMap::from_fn(3, 3, |r, c| (r + c) as f64 / 4.0);
        let ones = UncertaintyMap::filled(3, 3, 1.0);
        assert_eq!(mask_residual(&ones, &m).unwrap(), m);
        let zeros = UncertaintyMap::zeros(3, 3);
        assert!(mask_residual(&zeros, &m).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let half = UncertaintyMap::filled(2, 2, 0.5);
        let p = ProbMap::filled(2, 2, 0.8);
        assert!(mask_residual(&half, &p).unwrap().as_slice().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(mask_residual(&half, &m).is_err());
    }

    #[test]
    fn forward_marginal_limits() {
        let s = sched();
        let y0 = ProbMap::from_fn(4, 4, |r, _| if r % 2 == 0 { 1.0 } else { 0.0 });
        let mc = ProbMap::filled(4, 4, 0.3);
        let p1 = forward_marginal_param(&s, 1, &y0, &mc).unwrap();
        for (a, b) in p1.as_slice().iter().zip(y0.as_slice()) {
            assert!((a - b).abs() < 1e-3);
        }
        let pt = forward_marginal_param(&s, 1000, &y0, &mc).unwrap();
        for &a in pt.as_slice() {
            assert!((a - 0.3).abs() < 0.01);
        }
        assert!(forward_marginal_param(&s, 0, &y0, &mc).is_err());
        assert!(forward_marginal_param(&s, 1001, &y0, &mc).is_err());
    }

    #[test]
    fn forward_marginal_direct_value() {
        // Find t with ᾱ_t near 0.25 and evaluate the closed form by hand.
        let s = sched();
        let t = (1..=1000).min_by(|&a, &b| {
            let da = (s.alpha_bar(a).unwrap() - 0.25).abs();
            let db = (s.alpha_bar(b).unwrap() - 0.25).abs();
            da.partial_cmp(&db).unwrap()
        });
        let t = t.unwrap();
        let ab = s.alpha_bar(t).unwrap();
        let p = forward_marginal_param(&s, t, &ProbMap::zeros(1, 1), &ProbMap::filled(1, 1, 0.8)).unwrap();
        assert!((p.get(0, 0) - (1.0 - ab) * 0.8).abs() < 1e-15);
        // At exactly ᾱ = 0.25 the value is 0.6.
        assert!(((1.0 - 0.25) * 0.8_f64 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sample_forward_degenerate_cases() {
        let s = sched();
        let y0 = ProbMap::from_fn(8, 8, |r, c| ((r * c) % 2) as f64);
        let mut rng = seeded(3);
        // M̃_c = y0: no noise at any step.
        let f = sample_forward(&s, 1000, &y0, &y0, &mut rng).unwrap();
        assert_eq!(f.epsilon.count_ones(), 0);
        assert_eq!(f.y_t, y0);
        assert!(sample_forward(&s, 0, &y0, &y0, &mut rng).is_err());
    }

    #[test]
    fn sample_forward_is_deterministic() {
        let s = sched();
        let y0 = ProbMap::from_fn(8, 8, |r, _| (r % 2) as f64);
        let mc = ProbMap::filled(8, 8, 0.5);
        let a = sample_forward(&s, 700, &y0, &mc, &mut seeded(9)).unwrap();
        let b = sample_forward(&s, 700, &y0, &mc, &mut seeded(9)).unwrap();
        assert_eq!(a.epsilon, b.epsilon);
        assert_eq!(a.y_t, b.y_t);
    }

    #[test]
    fn posterior_documented_value() {
        // Two-state enumeration: q(y_t=1|k)·q(k|y0) for k ∈ {0,1}.
        let (a, abp, m) = (0.9, 0.5, 0.5);
        let lik = |k: f64| a * k + (1.0 - a) * m;
        let pri = |k: f64| if k == 1.0 { abp * 1.0 + (1.0 - abp) * m } else { 1.0 - (abp + (1.0 - abp) * m) };
        let oracle = lik(1.0) * pri(1.0) / (lik(1.0) * pri(1.0) + lik(0.0) * pri(0.0));
        let got = posterior_param(1.0 - a, abp, 1.0, 1.0, m);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.9828).abs() < 1e-4);
    }

    #[test]
    fn posterior_delta_cases() {
        // β_t = 0, y_t = 1: likelihood is a delta at 1.
        assert_eq!(posterior_param(0.0, 0.3, 1.0, 0.0, 0.4), 1.0);
        // ᾱ_{t−1} = 1, y_0 = 0: prior is a delta at 0.
        assert_eq!(posterior_param(0.3, 1.0, 1.0, 0.0, 0.4), 0.0);
        // 0/0: inconsistent deltas fall back to y_t.
        assert_eq!(posterior_param(0.0, 1.0, 1.0, 0.0, 0.0), 1.0);
        assert_eq!(posterior_param(0.0, 1.0, 0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn compose_examples() {
        let mc = ProbMap::from_fn(4, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        let y0 = ProbMap::from_fn(4, 4, |r, _| (r % 2) as f64);
        let u0 = UncertaintyMap::zeros(4, 4);
        let zero = ProbMap::zeros(4, 4);
        assert_eq!(compose_refined_mask(&zero, &u0, &mc).unwrap(), mc);
        let u1 = UncertaintyMap::filled(4, 4, 1.0);
        assert_eq!(compose_refined_mask(&y0, &u1, &mc).unwrap(), y0);
        // Ideal residual composition.
        let gt = BinaryMap::from_fn(4, 4, |r, c| (r + c) % 3 == 0);
        let u = UncertaintyMap::from_grid(mc.grid().zip_map(gt.grid(), |a, b| (a - b).abs()).unwrap());
        let y0 = mask_residual(&u, &gt.to_prob()).unwrap();
        let mr = compose_refined_mask(&y0, &u, &mc).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let (uu, g, m) = (u.get(r, c), gt.get(r, c), mc.get(r, c));
                assert!((mr.get(r, c) - (uu * g + (1.0 - uu) * m)).abs() < 1e-15);
            }
        }
    }
}

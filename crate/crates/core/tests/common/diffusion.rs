use super::rng;
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

type BigRational = Ratio<BigInt>;
use umbd::diffusion::{
    bernoulli_posterior, ddim_reverse_step, ddim_transitions, ddpm_reverse_step, forward_marginal_param,
    select_ddim_subsequence, NoiseSchedule, SigmaRule,
};
use umbd::{BinaryMap, ProbMap};

pub const KERNEL_TIMESTEPS: [usize; 6] = [1, 2, 10, 100, 500, 1000];

fn bern(x: f64, p: &BigRational) -> BigRational {
    if x == 1.0 { p.clone() } else { BigRational::one() - p }
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

/// q(y_{t-1}=1 | y_t, y0, m) by enumerating y_{t-1} ∈ {0, 1}, in exact
/// rational arithmetic on the given f64 inputs.
pub fn enumeration_posterior(beta_t: f64, ab_prev: f64, y_t: f64, y0: f64, m: f64) -> f64 {
    let (b, a, y0, m) = (exact(beta_t), exact(ab_prev), exact(y0), exact(m));
    let one = BigRational::one();
    let joint = |k: BigRational| {
        let step = (&one - &b) * &k + &b * &m;
        let prior = &a * &y0 + (&one - &a) * &m;
        let prior_k = if k.is_one() { prior } else { &one - prior };
        bern(y_t, &step) * prior_k
    };
    let (j0, j1) = (joint(BigRational::zero()), joint(BigRational::one()));
    let z = &j0 + &j1;
    if z <= exact(1e-12) { y_t } else { (j1 / z).to_f64().unwrap() }
}

/// Largest deviation between the library posterior and enumeration over the
/// binary (y_t, y0) grid, m ∈ {0, 0.1, …, 1}, and the listed timesteps.
pub fn kernel_suite(s: &NoiseSchedule) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let ms: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for &t in &KERNEL_TIMESTEPS {
        let beta = s.beta(t).unwrap();
        let ab_prev = s.alpha_bar(t - 1).unwrap();
        // one map per t: every (y_t, y0, m) combination as a pixel
        let mut yt = vec![];
        let mut y0 = vec![];
        let mut mm = vec![];
        for a in [0.0, 1.0] {
            for b in [0.0, 1.0] {
                for &m in &ms {
                    yt.push(a);
                    y0.push(b);
                    mm.push(m);
                }
            }
        }
        let n = yt.len();
        let got = bernoulli_posterior(
            s,
            t,
            &ProbMap::new(1, n, yt.clone()).unwrap(),
            &ProbMap::new(1, n, y0.clone()).unwrap(),
            &ProbMap::new(1, n, mm.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..n {
            let want = enumeration_posterior(beta, ab_prev, yt[i], y0[i], mm[i]);
            worst = worst.max((got.as_slice()[i] - want).abs());
            cases += 1;
        }
    }
    (worst, cases)
}

/// Largest gap between the step-by-step forward recursion and the closed
/// form over every t ≤ T and a (y0, m) grid.
pub fn marginal_consistency(s: &NoiseSchedule) -> f64 {
    let mut worst = 0.0f64;
    let ms: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut y0s = vec![];
    let mut mv = vec![];
    for y in [0.0, 1.0] {
        for &m in &ms {
            y0s.push(y);
            mv.push(m);
        }
    }
    let n = y0s.len();
    let y0 = ProbMap::new(1, n, y0s.clone()).unwrap();
    let mm = ProbMap::new(1, n, mv.clone()).unwrap();
    let mut p = y0s.clone();
    for t in 1..=s.steps() {
        let b = s.beta(t).unwrap();
        for i in 0..n {
            // P(y_t = 1) = P(y_{t-1}=1)·((1-β)+β m) + P(y_{t-1}=0)·β m
            p[i] = p[i] * ((1.0 - b) + b * mv[i]) + (1.0 - p[i]) * (b * mv[i]);
        }
        let closed = forward_marginal_param(s, t, &y0, &mm).unwrap();
        for i in 0..n {
            worst = worst.max((closed.as_slice()[i] - p[i]).abs());
        }
    }
    worst
}

/// Largest gap between P(|y0 − ε| = 1) under the noise law and the closed
/// form marginal, evaluated analytically.
pub fn reparameterization_law(s: &NoiseSchedule, timesteps: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for &t in timesteps {
        let ab = s.alpha_bar(t).unwrap();
        for y0 in [0.0, 1.0] {
            for i in 0..=10 {
                let m = i as f64 / 10.0;
                let pe = (1.0 - ab) * (m - y0).abs();
                // y0 ⊕ ε is 1 when exactly one of them is 1
                let law = if y0 == 1.0 { 1.0 - pe } else { pe };
                let closed = forward_marginal_param(
                    s,
                    t,
                    &ProbMap::filled(1, 1, y0),
                    &ProbMap::filled(1, 1, m),
                )
                .unwrap()
                .get(0, 0);
                worst = worst.max((law - closed).abs());
            }
        }
    }
    worst
}

pub struct Instance {
    pub y0: ProbMap,
    pub mc_tilde: ProbMap,
}

/// Binary y0 = U·gt and m = U·coarse with binary U.
pub fn random_instance(h: usize, w: usize, seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = h * w;
    let u: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let coarse: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let y0 = (0..n).map(|i| u[i] * gt[i]).collect();
    let m = (0..n).map(|i| u[i] * coarse[i]).collect();
    Instance { y0: ProbMap::new(h, w, y0).unwrap(), mc_tilde: ProbMap::new(h, w, m).unwrap() }
}

fn sample_start(m: &ProbMap, r: &mut impl Rng) -> ProbMap {
    let v = m.as_slice().iter().map(|&p| if r.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
    ProbMap::new(m.height(), m.width(), v).unwrap()
}

fn true_noise(y_t: &ProbMap, y0: &ProbMap) -> ProbMap {
    ProbMap::from_grid(y_t.grid().zip_map(y0.grid(), |a, b| (a - b).abs()).unwrap())
}

/// Full ancestral chain with ε̂ = y_t ⊕ y0; returns whether the final μ̂
/// thresholded at 0.5 equals y0.
pub fn ddpm_oracle_recovers(s: &NoiseSchedule, inst: &Instance, seed: u64) -> bool {
    let mut r = rng(seed);
    let mut y = sample_start(&inst.mc_tilde, &mut r);
    let mut last_mu = None;
    for t in (1..=s.steps()).rev() {
        let eps = true_noise(&y, &inst.y0);
        let step = ddpm_reverse_step(s, t, &y, &eps, &inst.mc_tilde, &mut r).unwrap();
        y = step.y_prev.to_prob();
        last_mu = Some(step.mu_hat);
    }
    let out = BinaryMap::threshold(last_mu.unwrap().grid(), 0.5);
    out.to_prob() == inst.y0
}

pub fn ddim_oracle_recovers(s: &NoiseSchedule, inst: &Instance, steps: usize, rule: SigmaRule, seed: u64) -> bool {
    let mut r = rng(seed);
    let mut y = sample_start(&inst.mc_tilde, &mut r);
    let seq = select_ddim_subsequence(s.steps(), steps).unwrap();
    for (hi, lo) in ddim_transitions(&seq) {
        let eps = true_noise(&y, &inst.y0);
        y = ddim_reverse_step(s, hi, lo, &y, &eps, &inst.mc_tilde, rule, &mut r).unwrap().to_prob();
    }
    y == inst.y0
}

/// Largest deviation, over the transitions of a T_infer-step chain and a
/// (y0, m) grid, between P(y_lo = 1) after one oracle DDIM step from the
/// exact y_hi marginal and the closed-form marginal at t_lo. Zero means
/// the rule keeps every intermediate latent on the forward marginals.
pub fn ddim_marginal_gap(s: &NoiseSchedule, steps: usize, rule: SigmaRule) -> f64 {
    let seq = select_ddim_subsequence(s.steps(), steps).unwrap();
    let mut worst = 0.0f64;
    for (hi, lo) in ddim_transitions(&seq) {
        if lo == 0 {
            continue;
        }
        let c = umbd::diffusion::ddim_coefficients(s, hi, lo, rule).unwrap();
        let (ab_hi, ab_lo) = (s.alpha_bar(hi).unwrap(), s.alpha_bar(lo).unwrap());
        for y0 in [0.0, 1.0] {
            for i in 0..=10 {
                let m = i as f64 / 10.0;
                let p_hi = ab_hi * y0 + (1.0 - ab_hi) * m;
                let theta = |y: f64| (c[0] * y + c[1] * y0 + c[2] * m).clamp(0.0, 1.0);
                let p_lo = p_hi * theta(1.0) + (1.0 - p_hi) * theta(0.0);
                worst = worst.max((p_lo - (ab_lo * y0 + (1.0 - ab_lo) * m)).abs());
            }
        }
    }
    worst
}

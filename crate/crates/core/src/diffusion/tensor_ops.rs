//! Differentiable tensor forms of the kernels, used inside training losses.

use super::NoiseSchedule;
use crate::error::Result;
use candle_core::{DType, Device, Tensor};

/// Per-sample `[B, 1, 1, 1]` column built from a schedule lookup.
pub fn per_sample(values: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, (values.len(), 1, 1, 1), device)?.to_dtype(dtype)?)
}

/// `α_t` and `ᾱ_{t−1}` columns for a batch of timesteps.
pub fn posterior_coefficients(s: &NoiseSchedule, ts: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let a = ts.iter().map(|&t| s.alpha(t)).collect::<Result<Vec<_>>>()?;
    let abp = ts.iter().map(|&t| s.alpha_bar(t - 1)).collect::<Result<Vec<_>>>()?;
    Ok((per_sample(&a, dtype, device)?, per_sample(&abp, dtype, device)?))
}

/// Tensor posterior `φ_post`; `alpha_t`, `alpha_bar_prev` broadcast over
/// `[B, 1, H, W]` maps. Where the normalizer vanishes the result falls
/// back to `y_t`, as in the scalar kernel.
pub fn posterior(alpha_t: &Tensor, alpha_bar_prev: &Tensor, y_t: &Tensor, y0: &Tensor, mc_tilde: &Tensor) -> Result<Tensor> {
    let one_minus_a = alpha_t.affine(-1.0, 1.0)?;
    let shared = one_minus_a.broadcast_mul(&(y_t + mc_tilde)?.affine(-1.0, 1.0)?.abs()?)?;
    let l1 = alpha_t.broadcast_mul(y_t)?.add(&shared)?;
    let l0 = alpha_t.broadcast_mul(&y_t.affine(-1.0, 1.0)?)?.add(&shared)?;
    let one_minus_abp = alpha_bar_prev.affine(-1.0, 1.0)?;
    let p1 = alpha_bar_prev.broadcast_mul(y0)?.add(&one_minus_abp.broadcast_mul(mc_tilde)?)?;
    let p0 = alpha_bar_prev
        .broadcast_mul(&y0.affine(-1.0, 1.0)?)?
        .add(&one_minus_abp.broadcast_mul(&mc_tilde.affine(-1.0, 1.0)?)?)?;
    let n1 = (l1 * p1)?;
    let n0 = (l0 * p0)?;
    let z = (&n1 + n0)?;
    let ok = z.gt(super::POSTERIOR_EPS)?;
    let ratio = (n1 / z.maximum(super::POSTERIOR_EPS)?)?;
    Ok(ok.where_cond(&ratio, &y_t.broadcast_as(ratio.shape())?)?.clamp(0.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::bernoulli_posterior;
    use crate::grid::{Grid, ProbMap};

    #[test]
    fn matches_scalar_kernel() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let dev = Device::Cpu;
        let yt = ProbMap::from_fn(5, 5, |r, c| ((r * 3 + c) % 4) as f64 / 3.0);
        let y0 = ProbMap::from_fn(5, 5, |r, c| ((r + 2 * c) % 3) as f64 / 2.0);
        let m = ProbMap::from_fn(5, 5, |r, c| ((r * c) % 5) as f64 / 4.0);
        for &t in &[1usize, 7, 300, 1000] {
            let want = bernoulli_posterior(&s, t, &yt, &y0, &m).unwrap();
            let (a, abp) = posterior_coefficients(&s, &[t], DType::F64, &dev).unwrap();
            let got = posterior(
                &a,
                &abp,
                &yt.to_tensor(DType::F64, &dev).unwrap(),
                &y0.to_tensor(DType::F64, &dev).unwrap(),
                &m.to_tensor(DType::F64, &dev).unwrap(),
            )
            .unwrap();
            let got = Grid::from_tensor(&got).unwrap();
            for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((g - w).abs() < 1e-9, "t={t}: {g} vs {w}");
            }
        }
    }
}

//! Scaled dot-product attention as a single op with a hand-written
//! backward pass. The score matrix is never materialized, which keeps the
//! 256-token windows of the fusion module cheap in memory and time.

use crate::error::Result;
use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};

/// Element type of the attention kernels.
trait Real: Copy + Default + PartialOrd + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> + std::ops::AddAssign + std::ops::DivAssign {
    const NEG_INF: Self;
    fn from_f64(x: f64) -> Self;
    /// In-place `exp`; inputs are `≤ 0`.
    fn exp_in_place(xs: &mut [Self]);
}

impl Real for f64 {
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

impl Real for f32 {
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    /// Range reduction to `[−ln2/2, ln2/2]` plus a degree-6 Taylor
    /// polynomial, relative error below 2e−7; written to auto-vectorize.
    fn exp_in_place(xs: &mut [Self]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        const ROUND: f32 = 12_582_912.0;
        for x in xs {
            let v = x.max(-87.0);
            let n = (v * LOG2E + ROUND) - ROUND;
            let r = v - n * LN2_HI - n * LN2_LO;
            let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
            let scale = f32::from_bits(((n as i32).wrapping_add(127) as u32).wrapping_shl(23));
            *x = p * scale;
        }
    }
}

struct Dims {
    groups: usize,
    queries: usize,
    keys: usize,
    dim: usize,
}

const LANES: usize = 8;

/// Dot product with independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::default(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::default();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |s, v| s + *v)
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

fn max_of<T: Real>(xs: &[T]) -> T {
    let mut m = [T::NEG_INF; LANES];
    let c = xs.chunks_exact(LANES);
    let rest = c.remainder();
    for x in c {
        for l in 0..LANES {
            if x[l] > m[l] {
                m[l] = x[l];
            }
        }
    }
    rest.iter().chain(m.iter()).fold(T::NEG_INF, |a, &b| if b > a { b } else { a })
}

fn sum_of<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::default(); LANES];
    let c = xs.chunks_exact(LANES);
    let rest = c.remainder();
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    rest.iter().chain(acc.iter()).fold(T::default(), |a, &b| a + b)
}

/// `[keys, dim]` → `[dim, keys]`.
fn transpose<T: Real>(m: &[T], keys: usize, dim: usize) -> Vec<T> {
    let mut t = vec![T::default(); m.len()];
    for j in 0..keys {
        for c in 0..dim {
            t[c * keys + j] = m[j * dim + c];
        }
    }
    t
}

/// Softmax row of `q_i · K^T · scale` into `p`, with `kt = K^T`.
fn row_weights<T: Real>(q: &[T], kt: &[T], keys: usize, scale: T, p: &mut [T]) {
    p.fill(T::default());
    for (c, qc) in q.iter().enumerate() {
        axpy(*qc * scale, &kt[c * keys..(c + 1) * keys], p);
    }
    let max = max_of(p);
    for pj in p.iter_mut() {
        *pj = *pj - max;
    }
    T::exp_in_place(p);
    let inv = T::from_f64(1.0) / sum_of(p);
    for pj in p.iter_mut() {
        *pj = *pj * inv;
    }
}

fn forward<T: Real>(q: &[T], k: &[T], v: &[T], d: &Dims, scale: T) -> Vec<T> {
    let mut out = vec![T::default(); d.groups * d.queries * d.dim];
    let mut p = vec![T::default(); d.keys];
    let kv = d.keys * d.dim;
    for g in 0..d.groups {
        let kt = transpose(&k[g * kv..(g + 1) * kv], d.keys, d.dim);
        let vt = transpose(&v[g * kv..(g + 1) * kv], d.keys, d.dim);
        for i in 0..d.queries {
            let row = (g * d.queries + i) * d.dim..(g * d.queries + i + 1) * d.dim;
            row_weights(&q[row.clone()], &kt, d.keys, scale, &mut p);
            for (c, o) in out[row].iter_mut().enumerate() {
                *o = dot(&p, &vt[c * d.keys..(c + 1) * d.keys]);
            }
        }
    }
    out
}

fn backward<T: Real>(q: &[T], k: &[T], v: &[T], dout: &[T], d: &Dims, scale: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dq = vec![T::default(); q.len()];
    let mut dk = vec![T::default(); k.len()];
    let mut dv = vec![T::default(); v.len()];
    let mut p = vec![T::default(); d.keys];
    let mut dp = vec![T::default(); d.keys];
    let (keys, dim) = (d.keys, d.dim);
    let kv = keys * dim;
    for g in 0..d.groups {
        let kt = transpose(&k[g * kv..(g + 1) * kv], keys, dim);
        let vt = transpose(&v[g * kv..(g + 1) * kv], keys, dim);
        let mut dkt = vec![T::default(); kv];
        let mut dvt = vec![T::default(); kv];
        for i in 0..d.queries {
            let row = (g * d.queries + i) * dim..(g * d.queries + i + 1) * dim;
            let qi = &q[row.clone()];
            let doi = &dout[row.clone()];
            row_weights(qi, &kt, keys, scale, &mut p);
            dp.fill(T::default());
            for (c, o) in doi.iter().enumerate() {
                axpy(*o, &vt[c * keys..(c + 1) * keys], &mut dp);
                axpy(*o, &p, &mut dvt[c * keys..(c + 1) * keys]);
            }
            let pd = dot(&p, &dp);
            for (dpj, pj) in dp.iter_mut().zip(&p) {
                *dpj = *pj * (*dpj - pd) * scale;
            }
            for (c, qc) in qi.iter().enumerate() {
                dq[row.start + c] = dot(&dp, &kt[c * keys..(c + 1) * keys]);
                axpy(*qc, &dp, &mut dkt[c * keys..(c + 1) * keys]);
            }
        }
        dk[g * kv..(g + 1) * kv].copy_from_slice(&transpose(&dkt, dim, keys));
        dv[g * kv..(g + 1) * kv].copy_from_slice(&transpose(&dvt, dim, keys));
    }
    (dq, dk, dv)
}

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("attention inputs must be contiguous".into()))?;
    Ok(&v[a..b])
}

struct Attention {
    scale: f64,
}

fn dims(q: &Shape, k: &Shape, v: &Shape) -> candle_core::Result<Dims> {
    let (g, lq, d) = q.dims3()?;
    let (gk, lk, dk) = k.dims3()?;
    if (gk, dk) != (g, d) || v.dims() != k.dims() {
        return Err(candle_core::Error::Msg(format!("attention shapes {q:?} {k:?} {v:?}")));
    }
    Ok(Dims { groups: g, queries: lq, keys: lk, dim: d })
}

impl CustomOp3 for Attention {
    fn name(&self) -> &'static str {
        "window-attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims(l1.shape(), l2.shape(), l3.shape())?;
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(q), CpuStorage::F32(k), CpuStorage::F32(v)) => CpuStorage::F32(forward(
                contiguous(q, l1)?,
                contiguous(k, l2)?,
                contiguous(v, l3)?,
                &d,
                self.scale as f32,
            )),
            (CpuStorage::F64(q), CpuStorage::F64(k), CpuStorage::F64(v)) => CpuStorage::F64(forward(
                contiguous(q, l1)?,
                contiguous(k, l2)?,
                contiguous(v, l3)?,
                &d,
                self.scale,
            )),
            _ => return Err(candle_core::Error::Msg("attention needs matching f32 or f64 inputs".into())),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = dims(q.shape(), k.shape(), v.shape())?;
        let dev = q.device();
        let host32 = |t: &Tensor| t.flatten_all()?.to_vec1::<f32>();
        let host64 = |t: &Tensor| t.flatten_all()?.to_vec1::<f64>();
        let (dq, dk, dv) = match q.dtype() {
            DType::F32 => {
                let (a, b, c) = backward(&host32(q)?, &host32(k)?, &host32(v)?, &host32(grad)?, &d, self.scale as f32);
                (Tensor::from_vec(a, q.shape(), dev)?, Tensor::from_vec(b, k.shape(), dev)?, Tensor::from_vec(c, v.shape(), dev)?)
            }
            _ => {
                let (a, b, c) = backward(&host64(q)?, &host64(k)?, &host64(v)?, &host64(grad)?, &d, self.scale);
                (Tensor::from_vec(a, q.shape(), dev)?, Tensor::from_vec(b, k.shape(), dev)?, Tensor::from_vec(c, v.shape(), dev)?)
            }
        };
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

/// `softmax(q kᵀ · scale) v` over `[G, L, d]` groups.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(q.contiguous()?.apply_op3(&k.contiguous()?, &v.contiguous()?, Attention { scale })?)
}

/// Unfused reference; also returns the weights `[G, Lq, Lk]`.
pub fn attention_with_weights(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
    let weights = super::layers::softmax_last(&scores)?;
    Ok((weights.matmul(&v.contiguous()?)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn fused_matches_reference_values_and_gradients() {
        let dev = Device::Cpu;
        let q = Var::randn(0f64, 1.0, (3, 7, 4), &dev).unwrap();
        let k = Var::randn(0f64, 1.0, (3, 5, 4), &dev).unwrap();
        let v = Var::randn(0f64, 1.0, (3, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 7, 4), &dev).unwrap();
        let fused = attention(&q, &k, &v, 0.5).unwrap();
        let (reference, _) = attention_with_weights(&q, &k, &v, 0.5).unwrap();
        let diff = (&fused - &reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
        let gf = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for var in [&q, &k, &v] {
            let a = gf.get(var).unwrap();
            let b = gr.get(var).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{d}");
        }
    }

    #[test]
    fn f32_inputs_stay_f32() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f32, 1.0, (2, 4, 4), &dev).unwrap();
        let out = attention(&q, &q, &q, 1.0).unwrap();
        assert_eq!(out.dtype(), DType::F32);
        assert_eq!(out.dims(), &[2, 4, 4]);
        let (reference, _) = attention_with_weights(&q, &q, &q, 1.0).unwrap();
        let diff = (out - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut xs: Vec<f32> = (0..2000).map(|i| -(i as f32) * 0.05).collect();
        let want: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        f32::exp_in_place(&mut xs);
        for (g, w) in xs.iter().zip(want) {
            assert!(((*g as f64) - w).abs() <= 3e-7 * w + 1e-37, "{g} vs {w}");
        }
    }
}

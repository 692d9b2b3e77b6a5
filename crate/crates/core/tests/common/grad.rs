use super::{gradcheck, jitter, GradReport};
use candle_core::{DType, Device, Tensor, Var};
use umbd::losses;
use umbd::nn::layers::pyramid_sizes;
use umbd::nn::{Denoiser, DenoiserConfig, FeaturePyramid, HuqNet, HuqNetConfig, Mode, ParamStore};
use umbd::rng::seeded;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const WANT: usize = 24;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = super::rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = super::rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 0.0, 1.0, seed).ge(0.5).unwrap().to_dtype(DType::F64).unwrap()
}

fn trainable(store: &ParamStore) -> Vec<(String, Var)> {
    let names = store.param_names();
    store.named().into_iter().filter(|(n, _)| names.contains(n)).collect()
}

pub fn denoiser() -> GradReport {
    let store = ParamStore::new(3, DType::F64);
    let prior_ch = [4, 6, 8, 8];
    let mut cfg = DenoiserConfig::compact(prior_ch);
    cfg.base_channels = 4;
    cfg.time_embedding_dim = 8;
    cfg.adapted_channels = 8;
    let net = Denoiser::new(&store.root(), &cfg).unwrap();
    let vars = trainable(&store);
    // output layers start at zero; perturb so every path carries gradient
    jitter(&vars, 0.05, 4);
    let (h, w) = (8, 8);
    let sizes = pyramid_sizes(h, w);
    let prior = FeaturePyramid::new(
        (0..4).map(|i| randn(&[1, prior_ch[i], sizes[i].0, sizes[i].1], 10 + i as u64)).collect(),
    )
    .unwrap();
    let x = uniform(&[1, 3, h, w], 0.0, 1.0, 20);
    let cond = uniform(&[1, 1, h, w], 0.0, 1.0, 21);
    let y_t = binary(&[1, 1, h, w], 22);
    let target = binary(&[1, 1, h, w], 23);
    let mut f = || -> umbd::Result<Tensor> {
        let eps = net.forward(&x, &cond, &y_t, &[137], &prior, &mut Mode::Eval)?;
        losses::bce(&eps, &target)
    };
    gradcheck(&vars, &mut f, WANT, STEP, FLOOR, 5)
}

pub fn huqnet() -> GradReport {
    let store = ParamStore::new(7, DType::F64);
    let cfg = HuqNetConfig::default();
    let net = HuqNet::new(&store.root(), &cfg).unwrap();
    let vars = trainable(&store);
    jitter(&vars, 0.02, 8);
    let (h, w) = (8, 8);
    let x = uniform(&[1, 3, h, w], 0.0, 1.0, 30);
    let mc = uniform(&[1, 1, h, w], 0.05, 0.95, 31);
    let gt = binary(&[1, 1, h, w], 32);
    let target = (&mc - &gt).unwrap().abs().unwrap();
    let mut f = || -> umbd::Result<Tensor> {
        // fresh latent draws with the same seed on every evaluation
        let mut bnn_rng = seeded(99);
        let u = net.estimate(&x, &mc, &mut Mode::Eval, &mut bnn_rng)?;
        let (loss, _) = losses::huqnet_loss(&u.fused, &target, &u.sample_logits, &gt, &u.mu, &u.sigma, 0.1)?;
        Ok(loss)
    };
    gradcheck(&vars, &mut f, WANT, STEP, FLOOR, 9)
}

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// One report per loss function, gradients taken w.r.t. its tensor inputs.
pub fn losses() -> Vec<(&'static str, GradReport)> {
    let s = [1, 1, 8, 8];
    let gt = binary(&s, 40);
    let w = losses::boundary_weights(&gt).unwrap();
    let mut out = vec![];
    let mut run = |name: &'static str, vars: Vec<Var>, f: &mut dyn FnMut(&[Var]) -> umbd::Result<Tensor>| {
        let named: Vec<(String, Var)> = vars.iter().enumerate().map(|(i, v)| (format!("{name}.{i}"), v.clone())).collect();
        let mut g = || f(&vars);
        out.push((name, gradcheck(&named, &mut g, WANT, STEP, FLOOR, 41)));
    };
    let p = || var(uniform(&s, 0.05, 0.95, 42));
    let q = || var(uniform(&s, 0.05, 0.95, 43));
    run("kl_bernoulli", vec![q(), p()], &mut |v| losses::kl_bernoulli(v[0].as_tensor(), v[1].as_tensor()));
    run("bce", vec![p()], &mut |v| losses::bce(v[0].as_tensor(), &gt));
    run("bce_with_logits", vec![var(randn(&s, 44))], &mut |v| losses::bce_with_logits(v[0].as_tensor(), &gt));
    run("weighted_bce", vec![p()], &mut |v| losses::weighted_bce(v[0].as_tensor(), &gt, &w));
    run("weighted_iou", vec![p()], &mut |v| losses::weighted_iou(v[0].as_tensor(), &gt, &w));
    run("dice", vec![p()], &mut |v| losses::dice_loss(v[0].as_tensor(), &gt));
    run("gaussian_kl", vec![var(randn(&s, 45)), var(uniform(&s, 0.3, 2.0, 46))], &mut |v| {
        losses::gaussian_kl(v[0].as_tensor(), v[1].as_tensor())
    });
    run("diffusion", vec![q(), p(), var(uniform(&s, 0.05, 0.95, 47))], &mut |v| {
        Ok(losses::diffusion_loss(v[0].as_tensor(), v[1].as_tensor(), v[2].as_tensor(), &gt)?.0)
    });
    run("bnn", vec![var(randn(&s, 48)), var(randn(&s, 49)), var(uniform(&s, 0.3, 2.0, 50))], &mut |v| {
        Ok(losses::bnn_loss(v[0].as_tensor(), &gt, v[1].as_tensor(), v[2].as_tensor(), 0.1)?.0)
    });
    let target = uniform(&s, 0.0, 1.0, 51);
    run(
        "huqnet",
        vec![p(), var(randn(&s, 52)), var(randn(&s, 53)), var(uniform(&s, 0.3, 2.0, 54))],
        &mut |v| {
            Ok(losses::huqnet_loss(v[0].as_tensor(), &target, v[1].as_tensor(), &gt, v[2].as_tensor(), v[3].as_tensor(), 0.1)?
                .0)
        },
    );
    // posterior as used inside the diffusion objective
    let sched = umbd::diffusion::NoiseSchedule::cosine(1000).unwrap();
    let (a, abp) =
        umbd::diffusion::tensor_ops::posterior_coefficients(&sched, &[250], DType::F64, &Device::Cpu).unwrap();
    let y_t = binary(&s, 55);
    run("posterior", vec![p(), q()], &mut |v| {
        umbd::diffusion::tensor_ops::posterior(&a, &abp, &y_t, v[0].as_tensor(), v[1].as_tensor())?.sum_all().map_err(Into::into)
    });
    out
}

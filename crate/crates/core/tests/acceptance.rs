//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The toy experiment trains the full default
//! configuration, so this takes on the order of half an hour on one core.

mod common;

use common::diffusion as dx;
use common::*;
use std::path::{Path, PathBuf};
use std::time::Instant;
use umbd::datagen::{load_gray_png, write_dataset, DatasetManifest};
use umbd::diffusion::{NoiseSchedule, SigmaRule};
use umbd::metrics::{adaptive_emeasure, mae, smeasure, weighted_fmeasure};
use umbd::pipeline::run::{ablate_run, eval_run, open_models, train_run};
use umbd::pipeline::{refine_batch, RefineInput, RunConfig, RunDir, StageSelect, UncertaintySource};
use umbd::ProbMap;

struct Verdicts(Vec<(String, bool)>);

impl Verdicts {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.0.push((name.to_string(), pass));
    }
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::cosine(1000).unwrap()
}

fn kernel_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let (worst, cases) = dx::kernel_suite(&sched());
    let secs = start.elapsed().as_secs_f64();
    v.record(
        "kernel oracle suite",
        worst <= 1e-12 && secs < 10.0,
        format!("{cases} cases, max |posterior - enumeration| = {worst:.2e} (tol 1e-12), {secs:.2}s (limit 10s)"),
    );
}

fn marginal_consistency(v: &mut Verdicts) {
    let start = Instant::now();
    let worst = dx::marginal_consistency(&sched());
    let secs = start.elapsed().as_secs_f64();
    v.record(
        "marginal consistency",
        worst <= 1e-10 && secs < 30.0,
        format!("T = 1000, max |recursion - closed form| = {worst:.2e} (tol 1e-10), {secs:.2}s (limit 30s)"),
    );
}

fn reparameterization(v: &mut Verdicts) {
    let ts: Vec<usize> = (1..=1000).collect();
    let worst = dx::reparameterization_law(&sched(), &ts);
    v.record(
        "reparameterization law",
        worst < 1e-15,
        format!("t = 1..1000, binary y0, max |law - marginal| = {worst:.2e} (tol 1e-15)"),
    );
}

fn oracle_recovery(v: &mut Verdicts) {
    let s = sched();
    let n = 100;
    let mut ddpm = 0;
    let mut ddim = 0;
    let mut literal = 0;
    for i in 0..n {
        let inst = dx::random_instance(16, 16, 500 + i);
        ddpm += dx::ddpm_oracle_recovers(&s, &inst, 900 + i) as usize;
        ddim += dx::ddim_oracle_recovers(&s, &inst, 10, SigmaRule::Ratio, 900 + i) as usize;
        literal += dx::ddim_oracle_recovers(&s, &inst, 10, SigmaRule::Literal, 900 + i) as usize;
    }
    v.record(
        "oracle denoiser recovery",
        ddpm == n as usize && ddim == n as usize,
        format!("16x16, DDPM full chain {ddpm}/{n}, DDIM 10 steps (ratio rule) {ddim}/{n}"),
    );
    println!(
        "INFO literal sigma rule: DDIM 10 steps recovers {literal}/{n}; max marginal gap {:.3e} (ratio rule {:.1e})",
        dx::ddim_marginal_gap(&s, 10, SigmaRule::Literal),
        dx::ddim_marginal_gap(&s, 10, SigmaRule::Ratio)
    );
}

fn gradient_checks(v: &mut Verdicts) {
    let mut all = vec![("denoiser", grad::denoiser()), ("huqnet", grad::huqnet())];
    all.extend(grad::losses());
    let worst = all.iter().max_by(|a, b| a.1.max_rel.total_cmp(&b.1.max_rel)).unwrap();
    let fewest = all.iter().map(|(_, r)| r.checked).min().unwrap();
    let pass = all.iter().all(|(_, r)| r.max_rel < 1e-4 && r.checked >= 20);
    v.record(
        "gradient checks",
        pass,
        format!(
            "{} targets, f64 8x8, >= {fewest} entries each, max rel err {:.2e} in {} (tol 1e-4)",
            all.len(),
            worst.1.max_rel,
            worst.0
        ),
    );
}

fn metric_correctness(v: &mut Verdicts) {
    let mut r = rng(11);
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let g = random_gt(8, 8, &mut r);
        let p = random_pred(&g, &mut r);
        let d = [
            (mae(&p, &g).unwrap() - mae_oracle(&p, &g)).abs(),
            (weighted_fmeasure(&p, &g).unwrap() - wfm_oracle(&p, &g)).abs(),
            (adaptive_emeasure(&p, &g).unwrap() - emeasure_oracle(&p, &g)).abs(),
            (smeasure(&p, &g, 0.5).unwrap() - smeasure_oracle(&p, &g)).abs(),
        ];
        for k in 0..4 {
            worst[k] = worst[k].max(d[k]);
        }
    }
    let mut extremes = true;
    for _ in 0..5 {
        let g = random_gt(8, 8, &mut r);
        let perfect = g.to_prob();
        let inv = ProbMap::from_grid(g.grid().map(|x| 1.0 - x));
        extremes &= mae(&perfect, &g).unwrap() == 0.0 && mae(&inv, &g).unwrap() == 1.0;
        for f in [weighted_fmeasure, adaptive_emeasure] {
            extremes &= (f(&perfect, &g).unwrap() - 1.0).abs() < 1e-9 && f(&inv, &g).unwrap() < 1e-9;
        }
        extremes &= (smeasure(&perfect, &g, 0.5).unwrap() - 1.0).abs() < 1e-9 && smeasure(&inv, &g, 0.5).unwrap() < 1e-9;
    }
    let big = random_gt(64, 64, &mut r);
    let big_p = random_pred(&big, &mut r);
    let big_mae = (mae(&big_p, &big).unwrap() - mae_oracle(&big_p, &big)).abs();
    v.record(
        "metric correctness",
        extremes && worst[0] <= 1e-12 && big_mae <= 1e-12 && worst[1..].iter().all(|&d| d <= 1e-6),
        format!(
            "extremes {}; 20 cases max dev mae {:.1e}, F_w {:.1e}, E {:.1e}, S {:.1e}; 64x64 mae {:.1e}",
            if extremes { "ok" } else { "wrong" },
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            big_mae
        ),
    );
}

fn workdir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn masking_locality(v: &mut Verdicts, run: &RunDir, data_dir: &Path, work: &Path) {
    let cfg = run.load_config().unwrap();
    let data = umbd::datagen::load_dataset(data_dir).unwrap();
    let models = open_models(run, &cfg, &data).unwrap();
    let inputs: Vec<RefineInput> =
        data.test.iter().map(|s| RefineInput { id: &s.id, image: &s.image, coarse: None, gt: None }).collect();
    let mut in_memory = 0;
    for chunk in inputs.chunks(25) {
        for rec in refine_batch(&models, chunk, &cfg.inference, UncertaintySource::Zero, false).unwrap() {
            in_memory += (rec.refined == rec.coarse) as usize;
        }
    }
    let mut via_cli = 0;
    let picks = [0usize, 17, 42, 99];
    for &i in &picks {
        let id = &data.test[i].id;
        let out = work.join(format!("zero-{id}.png"));
        let trace = work.join(format!("zero-{id}"));
        let input = data_dir.join("test/images").join(format!("{id}.png"));
        let code = umbd::cli::main_with_args([
            "umbd",
            "refine",
            "--run",
            run.root().to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
            "--uncertainty",
            "zero",
        ]);
        let same = code == 0 && load_gray_png(&out).unwrap() == load_gray_png(&trace.join("coarse.png")).unwrap();
        via_cli += same as usize;
    }
    v.record(
        "masking locality end-to-end",
        in_memory == data.test.len() && via_cli == picks.len(),
        format!(
            "U = 0: refined == coarse bit-exactly on {in_memory}/{} test images in memory, {via_cli}/{} through the refine command",
            data.test.len(),
            picks.len()
        ),
    );
}

fn toy_experiment(v: &mut Verdicts, work: &Path) {
    let data_dir = work.join("toy-data");
    let manifest = DatasetManifest::default();
    write_dataset(&manifest, &data_dir).unwrap();
    let run = RunDir::new(work.join("toy-run"));
    let cfg = RunConfig::default();

    let start = Instant::now();
    let reports = train_run(&run, &data_dir, &cfg, StageSelect::All).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    for r in &reports {
        println!("INFO stage {}: {} epochs, {} steps, last loss {:.4}", r.stage, r.epochs_run, r.steps, r.last_loss);
    }

    let out = eval_run(&run, &data_dir, 5, UncertaintySource::Model).unwrap();
    let (c, r) = (&out.coarse, &out.refined);
    let prior_ok = (0.03..=0.08).contains(&c.mae);
    v.record(
        "toy refinement experiment",
        prior_ok && train_secs < 1800.0 && r.mae <= 0.9 * c.mae && r.f_beta_w >= c.f_beta_w,
        format!(
            "{}/{} @ {}px, coarse MAE {:.4} (prior range [0.03, 0.08]), refined MAE {:.4} = {:.3} x coarse (limit 0.90), \
             F_w coarse {:.4} refined {:.4}, 5 seeds, training {:.1} min (limit 30)",
            manifest.train_count,
            manifest.test_count,
            manifest.image_size,
            c.mae,
            r.mae,
            r.mae / c.mae,
            c.f_beta_w,
            r.f_beta_w,
            train_secs / 60.0
        ),
    );
    match out.uncertainty {
        Some(u) => v.record(
            "uncertainty quality",
            u.model_l1 < u.entropy_l1,
            format!("mean |U_model - U_gt| {:.4} vs entropy baseline {:.4}", u.model_l1, u.entropy_l1),
        ),
        None => v.record("uncertainty quality", false, "no uncertainty estimates recorded".into()),
    }

    let steps = [1, 2, 3, 5, 10];
    let rows = ablate_run(&run, &data_dir, &steps, 1).unwrap();
    let at = |t: usize| rows.iter().find(|r| r.t_infer == t).unwrap();
    let (m1, m3, m10) = (at(1).mae, at(3).mae, at(10).mae);
    let rel = (m3 - m10).abs() / m10;
    let monotone = rows.windows(2).all(|w| w[1].seconds_per_image > w[0].seconds_per_image);
    let times: Vec<String> = rows.iter().map(|r| format!("T{}={:.4}s", r.t_infer, r.seconds_per_image)).collect();
    v.record(
        "step ablation shape",
        rel <= 0.10 && m1 > m3 && monotone,
        format!(
            "MAE T1 {m1:.4}, T3 {m3:.4}, T10 {m10:.4}; |T3 - T10|/T10 = {:.1}% (limit 10%); per-image time {}",
            rel * 100.0,
            times.join(" ")
        ),
    );

    masking_locality(v, &run, &data_dir, work);
}

fn reproducibility(v: &mut Verdicts, work: &Path) {
    let data_dir = work.join("repro-data");
    let m = DatasetManifest { seed: 5, train_count: 24, test_count: 8, image_size: 32, ..Default::default() };
    write_dataset(&m, &data_dir).unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.batch_size = 8;
    cfg.train.huqnet_epochs = 2;
    cfg.train.denoiser_max_epochs = 2;
    cfg.train.finetune_max_epochs = 1;
    let mut files = vec![];
    for name in ["repro-a", "repro-b"] {
        let run = RunDir::new(work.join(name));
        train_run(&run, &data_dir, &cfg, StageSelect::All).unwrap();
        eval_run(&run, &data_dir, 2, UncertaintySource::Model).unwrap();
        files.push(std::fs::read(run.eval()).unwrap());
    }
    v.record(
        "reproducibility",
        files[0] == files[1] && !files[0].is_empty(),
        format!("two full runs (24/8 @ 32px, all stages, 2-seed eval): eval.csv {}", if files[0] == files[1] { "identical" } else { "differs" }),
    );
}

fn main() {
    let mut v = Verdicts(vec![]);
    let work = workdir();
    kernel_suite(&mut v);
    marginal_consistency(&mut v);
    reparameterization(&mut v);
    oracle_recovery(&mut v);
    gradient_checks(&mut v);
    metric_correctness(&mut v);
    reproducibility(&mut v, &work);
    toy_experiment(&mut v, &work);
    let failed: Vec<&str> = v.0.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
    println!("{} of {} criteria passed", v.0.len() - failed.len(), v.0.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

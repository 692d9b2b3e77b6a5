//! The `umbd` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! checkpoint error, 4 numerical failure.

use crate::datagen::{load_dataset, load_gray_png, load_image_png, save_map_png, write_dataset, DatasetManifest};
use crate::diffusion::SigmaRule;
use crate::error::{Error, Result};
use crate::grid::ProbMap;
use crate::pipeline::config::{PriorKind, RunConfig, Sampler};
use crate::pipeline::refine::{refine_batch, RefineInput, UncertaintySource};
use crate::pipeline::report::report_run;
use crate::pipeline::run::{ablate_run, eval_run, open_models, train_run, RunDir, StageSelect};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "umbd", version, about = "Uncertainty-masked Bernoulli diffusion for segmentation refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic camouflage corpus.
    GenData(GenDataArgs),
    /// Run training stages and write checkpoints into a run directory.
    Train(TrainArgs),
    /// Refine a single image.
    Refine(RefineArgs),
    /// Evaluate coarse and refined masks on the test split.
    Eval(EvalArgs),
    /// Refined metrics and per-image time for several step counts.
    AblateSteps(AblateArgs),
    /// Render figures for a run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.4)]
    pub strength: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "all")]
    pub stage: StageSelect,
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prior: Option<PriorKind>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub huqnet_epochs: Option<usize>,
    #[arg(long)]
    pub denoiser_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Coarse mask to refine instead of the prior's prediction.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-step latents and the uncertainty map.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub sampler: Option<Sampler>,
    #[arg(long)]
    pub sigma_rule: Option<SigmaRule>,
    #[arg(long, value_enum, default_value_t = UncertaintySource::Model)]
    pub uncertainty: UncertaintySource,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = UncertaintySource::Model)]
    pub uncertainty: UncertaintySource,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Step counts as a range `1..10` or a list `1,3,10`.
    #[arg(long, default_value = "1..10")]
    pub steps: String,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_steps(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidArgument(format!("cannot parse step list {s:?}"));
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::OutOfRange { .. } | Error::ShapeMismatch { .. } => 2,
        Error::CorruptDataset { .. }
        | Error::Io(_)
        | Error::Image(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Checkpoint(_) => 3,
        Error::Numerical(_) | Error::Tensor(_) | Error::TensorShape { .. } => 4,
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let manifest = DatasetManifest {
        seed: a.seed,
        image_size: a.size,
        strength: a.strength,
        train_count: a.train,
        test_count: a.test,
        ..Default::default()
    };
    manifest.validate()?;
    write_dataset(&manifest, &a.out)?;
    println!("wrote {} train / {} test samples to {}", a.train, a.test, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let run = RunDir::new(&a.run);
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None if run.config().exists() => run.load_config()?,
        None => RunConfig::default(),
    };
    if let Some(name) = a.run.file_name().and_then(|n| n.to_str()) {
        cfg.name = name.to_string();
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.prior {
        cfg.prior.kind = p;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(e) = a.huqnet_epochs {
        cfg.train.huqnet_epochs = e;
    }
    if let Some(e) = a.denoiser_epochs {
        cfg.train.denoiser_max_epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.train.finetune_max_epochs = e;
    }
    for r in train_run(&run, &a.data, &cfg, a.stage)? {
        println!(
            "stage {}: {} epochs, {} steps, last loss {:.5}{}",
            r.stage,
            r.epochs_run,
            r.steps,
            r.last_loss,
            r.best_validation_mae.map(|v| format!(", best validation MAE {v:.5}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn write_trace(dir: &Path, rec: &crate::pipeline::RefinementRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_map_png(rec.coarse.grid(), &dir.join("coarse.png"))?;
    save_map_png(rec.uncertainty.grid(), &dir.join("uncertainty.png"))?;
    if let Some(e) = &rec.entropy {
        save_map_png(e.grid(), &dir.join("entropy.png"))?;
    }
    for (i, (t, y)) in rec.trace.iter().enumerate() {
        save_map_png(y.grid(), &dir.join(format!("step{:02}_t{t:04}.png", i + 1)))?;
    }
    save_map_png(rec.y0_hat.grid(), &dir.join("y0_hat.png"))?;
    save_map_png(rec.refined.grid(), &dir.join("refined.png"))
}

fn refine(a: &RefineArgs) -> Result<()> {
    let run = RunDir::new(&a.run);
    let cfg = run.load_config()?;
    let image = load_image_png(&a.input)?;
    let coarse = a.coarse.as_deref().map(load_gray_png).transpose()?.map(ProbMap::from_grid);
    if let Some(c) = &coarse {
        if c.shape() != image.shape() {
            return Err(Error::shape(image.shape(), c.shape()));
        }
    }
    let data = match run.data_path() {
        Some(p) => load_dataset(&p)?,
        None => return Err(Error::Config(format!("{} records no training corpus", run.root().display()))),
    };
    let models = open_models(&run, &cfg, &data)?;
    let mut icfg = cfg.inference.clone();
    if let Some(s) = a.steps {
        icfg.steps = s;
    }
    if let Some(s) = a.sampler {
        icfg.sampler = s;
    }
    if let Some(r) = a.sigma_rule {
        icfg.sigma_rule = r;
    }
    if let Some(s) = a.seed {
        icfg.seed = s;
    }
    let id = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let input = RefineInput { id, image: &image, coarse: coarse.as_ref(), gt: None };
    let rec = refine_batch(&models, &[input], &icfg, a.uncertainty, a.trace.is_some())?.remove(0);
    if let Some(dir) = &a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_map_png(rec.refined.grid(), &a.out)?;
    if let Some(dir) = &a.trace {
        write_trace(dir, &rec)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let run = RunDir::new(&a.run);
    let out = eval_run(&run, &a.data, a.seeds, a.uncertainty)?;
    for (name, m) in [("coarse", out.coarse), ("refined", out.refined)] {
        println!(
            "{name:>8}: mae {:.4}  f_beta_w {:.4}  e_phi {:.4}  s_alpha {:.4}  (n = {})",
            m.mae, m.f_beta_w, m.e_phi, m.s_alpha, m.sample_count
        );
    }
    if let Some(u) = out.uncertainty {
        println!("uncertainty L1 to ground truth: model {:.4}, entropy {:.4}", u.model_l1, u.entropy_l1);
    }
    println!("wrote {}", run.eval().display());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let run = RunDir::new(&a.run);
    let steps = parse_steps(&a.steps)?;
    let rows = ablate_run(&run, &a.data, &steps, a.seeds)?;
    println!("{:>7} {:>8} {:>9} {:>8} {:>8} {:>10}", "T_infer", "mae", "f_beta_w", "e_phi", "s_alpha", "t[s/img]");
    for r in rows {
        println!(
            "{:>7} {:>8.4} {:>9.4} {:>8.4} {:>8.4} {:>10.5}",
            r.t_infer, r.mae, r.f_beta_w, r.e_phi, r.s_alpha, r.seconds_per_image
        );
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    for p in report_run(&RunDir::new(&a.run))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::AblateSteps(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

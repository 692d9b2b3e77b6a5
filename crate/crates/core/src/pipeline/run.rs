//! Run directories: `runs/<name>/{config.toml, checkpoints/, logs.csv,
//! eval.csv, figures/}`, plus the orchestration that fills them.

use super::config::RunConfig;
use super::eval::{ablate_steps, evaluate_corpus, write_csv, AblationRow, EvalOutcome};
use super::models::{build_prior, Models};
use super::refine::UncertaintySource;
use super::train::{
    train_stage1_huqnet, train_stage2_denoiser, train_stage3_finetune_huqnet, LogRow, StageReport, TrainingData,
};
use crate::datagen::{load_dataset, Dataset};
use crate::error::{Error, Result};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOGS_FILE: &str = "logs.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SAMPLES_FILE: &str = "eval_samples.csv";
pub const UNCERTAINTY_FILE: &str = "uncertainty.json";
pub const ABLATION_FILE: &str = "ablate_steps.csv";
/// Absolute path of the corpus the run was trained on.
pub const DATA_REF_FILE: &str = "data_path.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join(LOGS_FILE)
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join(EVAL_FILE)
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(self.checkpoints())?;
        std::fs::create_dir_all(self.figures())?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config())
    }

    /// The corpus recorded at training time, if any.
    pub fn data_path(&self) -> Option<PathBuf> {
        std::fs::read_to_string(self.root.join(DATA_REF_FILE)).ok().map(|s| PathBuf::from(s.trim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    One,
    Two,
    Three,
    All,
}

impl StageSelect {
    fn stages(self) -> &'static [u8] {
        match self {
            StageSelect::One => &[1],
            StageSelect::Two => &[2],
            StageSelect::Three => &[3],
            StageSelect::All => &[1, 2, 3],
        }
    }
}

impl std::str::FromStr for StageSelect {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "3" => Ok(Self::Three),
            "all" => Ok(Self::All),
            _ => Err(format!("stage must be 1, 2, 3 or all, got {s:?}")),
        }
    }
}

/// Builds the prior and networks of a run, loading whatever checkpoints exist.
pub fn open_models(run: &RunDir, config: &RunConfig, data: &Dataset) -> Result<Models> {
    let prior = build_prior(config, data, Some(&run.checkpoints()))?;
    let models = Models::new(config, prior)?;
    models.load_available(&run.checkpoints())?;
    Ok(models)
}

/// Runs the selected training stages and writes checkpoints and logs.
pub fn train_run(run: &RunDir, data_dir: &Path, config: &RunConfig, stages: StageSelect) -> Result<Vec<StageReport>> {
    config.validate()?;
    let data = load_dataset(data_dir)?;
    run.create()?;
    config.save(&run.config())?;
    let abs = std::fs::canonicalize(data_dir)?;
    std::fs::write(run.root().join(DATA_REF_FILE), abs.to_string_lossy().as_bytes())?;

    let models = open_models(run, config, &data)?;
    let training = TrainingData::new(&models, &data.train)?;

    let fresh = stages == StageSelect::All || !run.logs().exists();
    let file = OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(run.logs())?;
    let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let mut log = |row: &LogRow| -> Result<()> {
        writer.serialize(row)?;
        Ok(())
    };

    let mut reports = Vec::new();
    for &stage in stages.stages() {
        log::info!("training stage {stage}");
        let report = match stage {
            1 => train_stage1_huqnet(&models, &training, &mut log)?,
            2 => train_stage2_denoiser(&models, &training, &mut log)?,
            _ => train_stage3_finetune_huqnet(&models, &training, &mut log)?,
        };
        models.save(&run.checkpoints())?;
        std::fs::write(run.checkpoints().join(format!("stage{stage}.json")), serde_json::to_string_pretty(&report)?)?;
        reports.push(report);
    }
    drop(log);
    writer.flush()?;
    Ok(reports)
}

fn segmenter_name(config: &RunConfig) -> &'static str {
    match config.prior.kind {
        super::config::PriorKind::CorruptedOracle => "corrupted-oracle",
        super::config::PriorKind::ToyCnn => "toy-cnn",
    }
}

/// Evaluates the test split and writes `eval.csv` and the per-sample CSV.
pub fn eval_run(run: &RunDir, data_dir: &Path, seeds: usize, source: UncertaintySource) -> Result<EvalOutcome> {
    let config = run.load_config()?;
    let data = load_dataset(data_dir)?;
    let models = open_models(run, &config, &data)?;
    if source == UncertaintySource::Model && !run.checkpoints().join(super::models::HUQNET_FILE).exists() {
        return Err(Error::Checkpoint(format!("no trained uncertainty network in {}", run.checkpoints().display())));
    }
    let outcome = evaluate_corpus(&models, &data.test, &config.inference, seeds, source)?;
    write_csv(&run.eval(), &outcome.rows(segmenter_name(&config), config.inference.steps))?;
    write_csv(&run.root().join(SAMPLES_FILE), &outcome.samples)?;
    if let Some(u) = outcome.uncertainty {
        std::fs::write(run.root().join(UNCERTAINTY_FILE), serde_json::to_string_pretty(&u)?)?;
    }
    Ok(outcome)
}

/// Step ablation on the test split; writes `ablate_steps.csv`.
pub fn ablate_run(run: &RunDir, data_dir: &Path, steps: &[usize], seeds: usize) -> Result<Vec<AblationRow>> {
    let config = run.load_config()?;
    let data = load_dataset(data_dir)?;
    let models = open_models(run, &config, &data)?;
    let rows = ablate_steps(&models, &data.test, &config.inference, steps, seeds)?;
    write_csv(&run.root().join(ABLATION_FILE), &rows)?;
    Ok(rows)
}

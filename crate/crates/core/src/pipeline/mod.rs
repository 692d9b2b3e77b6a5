//! Staged training, inference, evaluation, checkpoints and run directories.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod models;
pub mod refine;
pub mod report;
pub mod run;
pub mod train;

pub use config::{InferenceConfig, PriorConfig, PriorKind, RunConfig, Sampler, TrainConfig};
pub use eval::{ablate_steps, evaluate_corpus, AblationRow, EvalOutcome, EvalRow, SampleRow, UncertaintyQuality};
pub use models::{build_prior, Models};
pub use refine::{refine_all, refine_batch, RefineInput, RefinementRecord, UncertaintySource};
pub use run::{RunDir, StageSelect};
pub use train::{LogRow, StageReport, TrainingData};

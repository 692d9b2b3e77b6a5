//! Uncertainty-masked Bernoulli diffusion for segmentation refinement.
//!
//! A frozen prior segmenter produces a coarse mask `M_c`; an uncertainty
//! network estimates where that mask is wrong; a Bernoulli diffusion model
//! regenerates the mask only inside the uncertain region and the result is
//! recombined with the untouched, confident part of `M_c`.
//!
//! Module map:
//! - [`diffusion`]: schedules, forward/posterior kernels and reverse samplers.
//! - [`nn`]: parameter store, layers, the conditional denoiser and HUQNet.
//! - [`prior`]: frozen prior segmenters and ground-truth uncertainty.
//! - [`losses`], [`metrics`]: training objectives and evaluation measures.
//! - [`datagen`]: synthetic camouflage corpus and dataset I/O.
//! - [`pipeline`]: staged training, refinement, evaluation and checkpoints.
//! - [`cli`]: the `umbd` command-line front end.

pub mod cli;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prior;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{BinaryMap, Grid, Image, ProbMap, UncertaintyMap};

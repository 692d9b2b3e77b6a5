//! Uncertainty-masked Bernoulli diffusion: schedule, forward and posterior
//! kernels, reverse samplers. Everything here is a pure function of its
//! inputs plus an explicit RNG.

mod kernels;
mod sampler;
mod schedule;
pub mod tensor_ops;

pub use kernels::{
    bernoulli_posterior, compose_refined_mask, forward_marginal_param, mask_residual, posterior_param,
    sample_forward, xor, ForwardSample, POSTERIOR_EPS,
};
pub use sampler::{
    ddim_coefficients, ddim_reverse_step, ddim_transitions, ddpm_reverse_step, select_ddim_subsequence, DdpmStep,
    SigmaRule,
};
pub use schedule::{NoiseSchedule, COSINE_OFFSET, MAX_BETA};

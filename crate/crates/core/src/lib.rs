//! Budgeted reuse of noise predictions in reverse-diffusion trajectory samplers.
//!
//! A sampling call walks `t = T..1`. At each step a cheap probe of the denoiser
//! stem is scored against the previous step; a calibrated envelope turns the
//! score into an upper bound on the reuse error, and the sampler's pathwise
//! sensitivity turns that bound into a deviation cost. Reuse happens only while
//! the accumulated cost stays inside the caller's budget, and the spent budget
//! is returned as a certificate.
//!
//! Module map:
//! - [`schedule`]: noise schedules and sensitivity coefficients
//! - [`sampler`]: DDPM/DDIM updates, noise tapes, full chains
//! - [`denoiser`]: stem/core denoisers, probes, guidance
//! - [`calibration`]: ghost-chain dataset, isotonic fit, conformal envelopes, artifact files
//! - [`policy`]: the budgeted caching policy and certificates
//! - [`escalation`]: certificate-driven runtime escalation
//! - [`testbed`]: synthetic tasks, point-mass world, closed loop, paired evaluation
//! - [`metrics`]: deviation, risk and interval statistics
//! - [`cli`]: experiment configuration and commands

// Negated float comparisons are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod escalation;
pub mod metrics;
pub mod policy;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod testbed;

pub use error::{Error, Result};

//! Denoisers split into a cheap stem and an expensive core.
//!
//! `denoise_full = core ∘ stem` by construction, and the probe feature is
//! pooled from the stem alone, so a probe never touches the core.

mod analytic;
mod mlp;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::sampler::{check_shape, NoisePrediction, Trajectory};
use crate::{Error, Result};

pub use analytic::{AnalyticGaussianDenoiser, MeanModel};
pub use mlp::{TinyMlpConfig, TinyMlpDenoiser};

/// Default score denominator guard.
pub const DEFAULT_OMEGA: f64 = 1e-6;

/// Intermediate representation produced by a stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub activations: Vec<f64>,
    /// Tensors carried past the stem (skip connections, conditioning).
    pub carry: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFeature {
    pub values: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub value: f64,
    pub step: usize,
}

/// Scalar multiply-adds per evaluation of each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub stem: u64,
    pub pool: u64,
    pub core: u64,
}

impl OpCount {
    pub fn probe(&self) -> u64 {
        self.stem + self.pool
    }

    pub fn full(&self) -> u64 {
        self.stem + self.core
    }
}

pub trait Denoiser: Send + Sync + fmt::Debug {
    /// `(H, d)` of trajectories this denoiser accepts.
    fn shape(&self) -> (usize, usize);
    fn context_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn stem(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<Stem>;
    fn core(&self, stem: &Stem, t: usize, context: &[f64]) -> Result<NoisePrediction>;
    fn pool(&self, stem: &Stem) -> Vec<f64>;
    fn op_count(&self) -> OpCount;
}

fn check_inputs(den: &dyn Denoiser, tau: &Trajectory, t: usize, context: &[f64]) -> Result<()> {
    check_shape(den.shape(), tau.shape())?;
    if context.len() != den.context_dim() {
        return Err(Error::DimensionMismatch { left: den.context_dim(), right: context.len() });
    }
    if !tau.is_finite() {
        return Err(Error::Denoiser { step: t, reason: "non-finite input".into() });
    }
    Ok(())
}

pub(crate) fn finite_or_fail(values: &[f64], step: usize, stage: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Denoiser { step, reason: format!("non-finite {stage} output") })
    }
}

/// One-shot evaluation `core(stem(τ))`.
pub fn denoise_full(den: &dyn Denoiser, tau: &Trajectory, t: usize, context: &[f64]) -> Result<NoisePrediction> {
    check_inputs(den, tau, t, context)?;
    let stem = den.stem(tau, t, context)?;
    den.core(&stem, t, context)
}

/// Probe feature from the stem only.
pub fn probe(den: &dyn Denoiser, tau: &Trajectory, t: usize, context: &[f64]) -> Result<ProbeFeature> {
    check_inputs(den, tau, t, context)?;
    let stem = den.stem(tau, t, context)?;
    Ok(ProbeFeature { values: den.pool(&stem), step: t })
}

/// `‖F_t - F_{t+1}‖₁ / (‖F_{t+1}‖₁ + ω)`.
pub fn score(f_t: &ProbeFeature, f_next: &ProbeFeature, omega: f64) -> Result<ProbeScore> {
    if f_t.values.len() != f_next.values.len() {
        return Err(Error::DimensionMismatch { left: f_t.values.len(), right: f_next.values.len() });
    }
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument(format!("omega must be positive, got {omega}")));
    }
    let diff: f64 = f_t.values.iter().zip(&f_next.values).map(|(a, b)| (a - b).abs()).sum();
    let base: f64 = f_next.values.iter().map(|v| v.abs()).sum();
    Ok(ProbeScore { value: diff / (base + omega), step: f_t.step })
}

/// `(1 + w) ε_c - w ε_∅`, evaluated as `ε_c + w (ε_c - ε_∅)`.
pub fn cfg_combine(cond: &NoisePrediction, uncond: &NoisePrediction, weight: f64) -> Result<NoisePrediction> {
    check_shape(cond.shape(), uncond.shape())?;
    if weight == 0.0 {
        return Ok(cond.clone());
    }
    let mut out = Array2::zeros(cond.shape());
    Zip::from(&mut out)
        .and(cond.values())
        .and(uncond.values())
        .for_each(|o, &c, &u| *o = c + weight * (c - u));
    Ok(NoisePrediction::new(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub weight: f64,
    pub null_context: Vec<f64>,
}

/// A denoiser plus optional guidance; produces the effective prediction the
/// sampler consumes.
#[derive(Debug, Clone)]
pub struct Model {
    denoiser: Arc<dyn Denoiser>,
    guidance: Option<Guidance>,
}

impl Model {
    pub fn new(denoiser: Arc<dyn Denoiser>) -> Self {
        Self { denoiser, guidance: None }
    }

    pub fn with_guidance(mut self, guidance: Guidance) -> Result<Self> {
        if guidance.null_context.len() != self.denoiser.context_dim() {
            return Err(Error::DimensionMismatch {
                left: self.denoiser.context_dim(),
                right: guidance.null_context.len(),
            });
        }
        self.guidance = Some(guidance);
        Ok(self)
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        self.denoiser.as_ref()
    }

    pub fn guidance(&self) -> Option<&Guidance> {
        self.guidance.as_ref()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.denoiser.shape()
    }

    pub fn context_dim(&self) -> usize {
        self.denoiser.context_dim()
    }

    /// Conditional stem; the probe source.
    pub fn stem(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<Stem> {
        check_inputs(self.denoiser(), tau, t, context)?;
        self.denoiser.stem(tau, t, context)
    }

    pub fn probe_of(&self, stem: &Stem, t: usize) -> ProbeFeature {
        ProbeFeature { values: self.denoiser.pool(stem), step: t }
    }

    /// Completes a step from an already computed conditional stem.
    pub fn finish(&self, stem: &Stem, tau: &Trajectory, t: usize, context: &[f64]) -> Result<NoisePrediction> {
        let cond = self.denoiser.core(stem, t, context)?;
        match &self.guidance {
            None => Ok(cond),
            Some(g) => {
                let uncond = denoise_full(self.denoiser(), tau, t, &g.null_context)?;
                cfg_combine(&cond, &uncond, g.weight)
            }
        }
    }

    /// Effective (post-guidance) prediction.
    pub fn effective(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<NoisePrediction> {
        let stem = self.stem(tau, t, context)?;
        self.finish(&stem, tau, t, context)
    }

    /// Multiply-adds of the probe, and of the rest of a full step.
    pub fn step_costs(&self) -> (u64, u64) {
        let ops = self.denoiser.op_count();
        let rest = match self.guidance {
            None => ops.core,
            Some(_) => ops.core + ops.full(),
        };
        (ops.probe(), rest)
    }

    /// `ℓ_Ψ / ℓ_core` for the speedup model.
    pub fn probe_cost_ratio(&self) -> f64 {
        let (probe, rest) = self.step_costs();
        probe as f64 / rest as f64
    }
}

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AnalyticGaussianDenoiser, MeanModel, Model};
use crate::schedule::NoiseSchedule;
use crate::seeds::{derive, Role};
use crate::{Error, Result};

/// Gaussian trajectories `τ_0 ~ N(μ + 1 cᵀ, ς² I)` with a per-channel
/// context offset `c ~ U[-scale, scale]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTrajectoryTask {
    pub horizon: usize,
    pub dim: usize,
    pub mean: Array2<f64>,
    pub variance: f64,
    pub context_scale: f64,
}

impl GaussianTrajectoryTask {
    /// Smooth base mean: channel `j` follows `A sin(2π h/H + j)`.
    pub fn new(horizon: usize, dim: usize, variance: f64, context_scale: f64, amplitude: f64) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::InvalidArgument("task shape must be positive".into()));
        }
        if !(variance >= 0.0 && context_scale >= 0.0) {
            return Err(Error::InvalidArgument("task variance and context scale must be >= 0".into()));
        }
        let mean = Array2::from_shape_fn((horizon, dim), |(h, j)| {
            amplitude * (std::f64::consts::TAU * h as f64 / horizon as f64 + j as f64).sin()
        });
        Ok(Self { horizon, dim, mean, variance, context_scale })
    }

    pub fn sample_context(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| self.context_scale * rng.gen_range(-1.0..=1.0)).collect()
    }

    /// Contexts for episodes `offset..offset + n` of the stream `base`.
    pub fn contexts(&self, base: u64, offset: u64, n: usize) -> Vec<Vec<f64>> {
        (0..n as u64).map(|i| self.sample_context(derive(base, Role::Context, offset + i))).collect()
    }

    /// The exact denoiser for this task under `sched`.
    pub fn analytic_model(self: &Arc<Self>, sched: &NoiseSchedule) -> Result<Model> {
        let den = AnalyticGaussianDenoiser::new(self.clone(), self.variance, sched)?;
        Ok(Model::new(Arc::new(den)))
    }
}

impl MeanModel for GaussianTrajectoryTask {
    fn shape(&self) -> (usize, usize) {
        (self.horizon, self.dim)
    }

    fn context_dim(&self) -> usize {
        self.dim
    }

    fn mean(&self, context: &[f64]) -> Result<Array2<f64>> {
        if context.len() != self.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: context.len() });
        }
        let offset = ndarray::ArrayView1::from(context);
        Ok(&self.mean + &offset)
    }
}

/// Tape seeds for episodes `offset..offset + n` of the stream `base`.
pub fn tape_seeds(base: u64, offset: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive(base, Role::Tape, offset + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_shifts_every_row() {
        let task = GaussianTrajectoryTask::new(4, 2, 0.1, 0.5, 1.0).unwrap();
        let m = task.mean(&[0.25, -0.5]).unwrap();
        for h in 0..4 {
            assert_eq!(m[[h, 0]], task.mean[[h, 0]] + 0.25);
            assert_eq!(m[[h, 1]], task.mean[[h, 1]] - 0.5);
        }
        assert!(task.mean(&[0.0]).is_err());
    }

    #[test]
    fn contexts_are_bounded_and_reproducible() {
        let task = GaussianTrajectoryTask::new(4, 3, 0.1, 0.5, 1.0).unwrap();
        let a = task.contexts(7, 0, 20);
        assert_eq!(a, task.contexts(7, 0, 20));
        assert_eq!(a[5..], task.contexts(7, 5, 15)[..]);
        assert!(a.iter().flatten().all(|c| c.abs() <= 0.5));
    }
}

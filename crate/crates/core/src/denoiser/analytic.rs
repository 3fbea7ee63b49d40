use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::{finite_or_fail, Denoiser, OpCount, Stem};
use crate::sampler::{NoisePrediction, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Context-dependent data mean `μ(c)` of an isotropic Gaussian trajectory prior.
pub trait MeanModel: Send + Sync + fmt::Debug {
    fn shape(&self) -> (usize, usize);
    fn context_dim(&self) -> usize;
    fn mean(&self, context: &[f64]) -> Result<Array2<f64>>;
}

/// Exact ε-predictor for data `τ_0 ~ N(μ(c), ς² I)`.
///
/// Stem: whitened residual `r = (τ - √ᾱ μ) / √v` with `v = ᾱς² + 1 - ᾱ`.
/// Core: `E[τ_0|τ] = μ + (√ᾱ ς² / √v) r`, then `ε = (τ - √ᾱ E[τ_0|τ]) / √(1-ᾱ)`.
/// Probe: `r` averaged over time, one value per channel.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    prior: Arc<dyn MeanModel>,
    variance: f64,
    alpha_bar: Vec<f64>,
}

impl AnalyticGaussianDenoiser {
    pub fn new(prior: Arc<dyn MeanModel>, variance: f64, sched: &NoiseSchedule) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("data variance must be finite and >= 0, got {variance}")));
        }
        Ok(Self { prior, variance, alpha_bar: sched.alpha_bars().to_vec() })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn prior(&self) -> &dyn MeanModel {
        self.prior.as_ref()
    }

    fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t.wrapping_sub(1))
            .copied()
            .ok_or(Error::StepOutOfRange { t, steps: self.alpha_bar.len() })
    }

    /// Closed-form posterior mean `E[τ_0 | τ_t]`.
    pub fn posterior_mean(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<Array2<f64>> {
        let ab = self.alpha_bar(t)?;
        let mu = self.prior.mean(context)?;
        let shrink = ab.sqrt() * self.variance / (ab * self.variance + 1.0 - ab);
        Ok(&mu + &((tau.values() - &(&mu * ab.sqrt())) * shrink))
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn shape(&self) -> (usize, usize) {
        self.prior.shape()
    }

    fn context_dim(&self) -> usize {
        self.prior.context_dim()
    }

    fn feature_dim(&self) -> usize {
        self.prior.shape().1
    }

    fn stem(&self, tau: &Trajectory, t: usize, context: &[f64]) -> Result<Stem> {
        let ab = self.alpha_bar(t)?;
        let mu = self.prior.mean(context)?;
        let scale = ab.sqrt();
        let inv_sd = 1.0 / (ab * self.variance + 1.0 - ab).sqrt();
        let mut r = Array2::zeros(tau.shape());
        Zip::from(&mut r)
            .and(tau.values())
            .and(&mu)
            .for_each(|r, &x, &m| *r = (x - scale * m) * inv_sd);
        let activations: Vec<f64> = r.iter().copied().collect();
        finite_or_fail(&activations, t, "stem")?;
        Ok(Stem { activations, carry: vec![tau.values().clone(), mu] })
    }

    fn core(&self, stem: &Stem, t: usize, _context: &[f64]) -> Result<NoisePrediction> {
        let ab = self.alpha_bar(t)?;
        let [tau, mu] = stem.carry.as_slice() else {
            return Err(Error::Denoiser { step: t, reason: "stem carries no input".into() });
        };
        let scale = ab.sqrt();
        let v = ab * self.variance + 1.0 - ab;
        let gain = scale * self.variance / v.sqrt();
        let inv_noise = 1.0 / (1.0 - ab).sqrt();
        let r = ArrayView2::from_shape(tau.dim(), &stem.activations)
            .map_err(|_| Error::Denoiser { step: t, reason: "stem shape".into() })?;
        let mut eps = Array2::zeros(tau.dim());
        Zip::from(&mut eps)
            .and(tau)
            .and(mu)
            .and(r)
            .for_each(|e, &x, &m, &r| {
                let x0 = m + gain * r;
                *e = (x - scale * x0) * inv_noise;
            });
        finite_or_fail(eps.as_slice().unwrap_or(&[]), t, "core")?;
        Ok(NoisePrediction::new(eps))
    }

    fn pool(&self, stem: &Stem) -> Vec<f64> {
        let (h, d) = self.shape();
        let r = ArrayView2::from_shape((h, d), &stem.activations).expect("stem shape");
        r.mean_axis(Axis(0)).expect("nonempty horizon").to_vec()
    }

    fn op_count(&self) -> OpCount {
        let (h, d) = self.shape();
        let n = (h * d) as u64;
        OpCount { stem: 2 * n, pool: n, core: 3 * n }
    }
}

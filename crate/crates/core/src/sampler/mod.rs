//! Reverse-diffusion updates and full-compute chains over shared noise tapes.

mod tape;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::Model;
use crate::schedule::{ddim_coefficients, NoiseSchedule, SamplerKind, SigmaRule, Variant};
use crate::{Error, Result};

pub use tape::{gaussian_block, NoiseTape};

macro_rules! grid_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            values: Array2<f64>,
        }

        impl $name {
            pub fn new(values: Array2<f64>) -> Self {
                Self { values }
            }

            pub fn zeros(horizon: usize, dim: usize) -> Self {
                Self { values: Array2::zeros((horizon, dim)) }
            }

            pub fn from_rows(horizon: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
                let found = data.len();
                Array2::from_shape_vec((horizon, dim), data)
                    .map(Self::new)
                    .map_err(|_| Error::ShapeMismatch { expected: (horizon, dim), found: (found, 1) })
            }

            pub fn values(&self) -> &Array2<f64> {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut Array2<f64> {
                &mut self.values
            }

            pub fn into_values(self) -> Array2<f64> {
                self.values
            }

            pub fn shape(&self) -> (usize, usize) {
                self.values.dim()
            }

            pub fn horizon(&self) -> usize {
                self.values.nrows()
            }

            pub fn dim(&self) -> usize {
                self.values.ncols()
            }

            pub fn frobenius_norm(&self) -> f64 {
                self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }

            /// Frobenius norm of `self - other`.
            pub fn distance(&self, other: &Self) -> Result<f64> {
                check_shape(self.shape(), other.shape())?;
                Ok(Zip::from(&self.values)
                    .and(&other.values)
                    .fold(0.0, |acc, a, b| acc + (a - b) * (a - b))
                    .sqrt())
            }
        }
    };
}

grid_type!(
    /// An `H × d` trajectory.
    Trajectory
);
grid_type!(
    /// An `H × d` noise prediction.
    NoisePrediction
);

pub(crate) fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch { expected, found });
    }
    Ok(())
}

/// `p·τ + q·ε + σ·ξ`, skipping the noise term when `σ = 0`.
fn affine_update(tau: &Trajectory, eps: &NoisePrediction, xi: &Trajectory, p: f64, q: f64, sigma: f64) -> Result<Trajectory> {
    check_shape(tau.shape(), eps.shape())?;
    check_shape(tau.shape(), xi.shape())?;
    let mut out = Array2::zeros(tau.shape());
    if sigma == 0.0 {
        Zip::from(&mut out).and(tau.values()).and(eps.values()).for_each(|o, &x, &e| *o = p * x + q * e);
    } else {
        Zip::from(&mut out)
            .and(tau.values())
            .and(eps.values())
            .and(xi.values())
            .for_each(|o, &x, &e, &z| *o = p * x + q * e + sigma * z);
    }
    Ok(Trajectory::new(out))
}

/// DDPM noise scale `σ_t`.
pub fn ddpm_sigma(sched: &NoiseSchedule, t: usize, rule: SigmaRule) -> f64 {
    let beta = sched.beta(t);
    match rule {
        SigmaRule::Beta => beta.sqrt(),
        SigmaRule::BetaTilde => (beta * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))).sqrt(),
    }
}

/// Stochastic DDIM scale `σ̃_t = η √((1-ᾱ_{t-1})/(1-ᾱ_t)) √(1 - ᾱ_t/ᾱ_{t-1})`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

/// `τ_{t-1} = (1/√α_t)(τ_t - β_t/√(1-ᾱ_t) ε) + σ_t ξ`.
pub fn ddpm_update(
    tau: &Trajectory,
    eps: &NoisePrediction,
    t: usize,
    sched: &NoiseSchedule,
    rule: SigmaRule,
    xi: &Trajectory,
) -> Result<Trajectory> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::DegenerateStep { t });
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let q = -inv_sqrt_alpha * sched.beta(t) / (1.0 - ab).sqrt();
    affine_update(tau, eps, xi, inv_sqrt_alpha, q, ddpm_sigma(sched, t, rule))
}

/// `τ_{t-1} = a_t τ_t + b_t ε + σ̃_t ξ`.
pub fn ddim_update(
    tau: &Trajectory,
    eps: &NoisePrediction,
    t: usize,
    sched: &NoiseSchedule,
    eta: f64,
    xi: &Trajectory,
) -> Result<Trajectory> {
    let (a, b) = ddim_coefficients(sched, t)?;
    affine_update(tau, eps, xi, a, b, ddim_sigma(sched, t, eta))
}

/// One reverse step `Φ_t` for the given sampler.
pub fn reverse_step(
    tau: &Trajectory,
    eps: &NoisePrediction,
    t: usize,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    xi: &Trajectory,
) -> Result<Trajectory> {
    match kind.variant {
        Variant::Ddpm => ddpm_update(tau, eps, t, sched, kind.ddpm_sigma_rule, xi),
        Variant::Ddim => ddim_update(tau, eps, t, sched, kind.eta, xi),
    }
}

/// Every state and effective prediction of a full-compute chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullRunRecord {
    /// `states[t] = τ_t` for `t = 0..=T`.
    pub states: Vec<Trajectory>,
    /// Slot `t - 1` holds the post-guidance `ε̂_t`.
    pub effective_eps: Vec<NoisePrediction>,
}

impl FullRunRecord {
    pub fn steps(&self) -> usize {
        self.effective_eps.len()
    }

    pub fn state(&self, t: usize) -> &Trajectory {
        &self.states[t]
    }

    pub fn eps(&self, t: usize) -> &NoisePrediction {
        &self.effective_eps[t - 1]
    }

    pub fn output(&self) -> &Trajectory {
        &self.states[0]
    }
}

pub(crate) fn check_tape(sched: &NoiseSchedule, tape: &NoiseTape, shape: (usize, usize)) -> Result<()> {
    if tape.steps() != sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "tape has {} steps, schedule has {}",
            tape.steps(),
            sched.steps()
        )));
    }
    check_shape(shape, tape.initial().shape())
}

/// Runs the denoiser at every step from `τ_T` down to `τ_0`.
pub fn run_full_chain(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    tape: &NoiseTape,
    context: &[f64],
) -> Result<FullRunRecord> {
    check_tape(sched, tape, model.shape())?;
    let steps = sched.steps();
    let mut states = vec![Trajectory::zeros(0, 0); steps + 1];
    let mut effective_eps = vec![NoisePrediction::zeros(0, 0); steps];
    states[steps] = tape.initial().clone();
    for t in (1..=steps).rev() {
        let eps = model.effective(&states[t], t, context)?;
        states[t - 1] = reverse_step(&states[t], &eps, t, sched, kind, tape.xi(t))?;
        effective_eps[t - 1] = eps;
    }
    Ok(FullRunRecord { states, effective_eps })
}

/// True iff every stored transition reproduces bit for bit.
pub fn replay_check(record: &FullRunRecord, sched: &NoiseSchedule, kind: &SamplerKind, tape: &NoiseTape) -> bool {
    let steps = sched.steps();
    if record.states.len() != steps + 1 || record.effective_eps.len() != steps || tape.steps() != steps {
        return false;
    }
    if record.states[steps] != *tape.initial() {
        return false;
    }
    (1..=steps).all(|t| {
        reverse_step(record.state(t), record.eps(t), t, sched, kind, tape.xi(t))
            .map(|next| next == record.states[t - 1])
            .unwrap_or(false)
    })
}

/// Per-step norms of a chain, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub state_norm: f64,
    pub eps_norm: f64,
}

pub fn chain_trace(record: &FullRunRecord) -> Vec<StepTrace> {
    (1..=record.steps())
        .rev()
        .map(|t| StepTrace {
            t,
            state_norm: record.state(t).frobenius_norm(),
            eps_norm: record.eps(t).frobenius_norm(),
        })
        .collect()
}

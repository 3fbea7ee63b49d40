//! The budgeted caching policy for one sampling call.
//!
//! The sampler keeps a single cached effective prediction. At each step below
//! `T` a probe score is turned into a bounded deviation cost; the step reuses
//! the cache when that cost fits in the remaining budget and recomputes
//! otherwise. The spent budget is the call's certificate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationArtifact, EnvelopeSet};
use crate::denoiser::{score, Model, ProbeFeature};
use crate::sampler::{check_tape, reverse_step, NoisePrediction, NoiseTape, Trajectory};
use crate::schedule::{NoiseSchedule, SamplerKind};
use crate::{Error, Result};

/// `ĉ_t = Γ · L_t · bound`.
pub fn step_cost(l_t: f64, gamma: f64, bound: f64) -> f64 {
    gamma * l_t * bound
}

/// Per-call budget bookkeeping.
///
/// Spending is tracked as a running sum `S` and the gate is `S + ĉ ≤ η`, so
/// the spent total never exceeds the budget in floating point either.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub eta_traj: f64,
    spent_total: f64,
    /// `(t, ĉ_t)` for every reuse step, in call order.
    pub spent: Vec<(usize, f64)>,
    pub eval_count: usize,
}

impl BudgetLedger {
    pub fn new(eta_traj: f64) -> Result<Self> {
        if !(eta_traj >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta_traj must be >= 0, got {eta_traj}")));
        }
        Ok(Self { eta_traj, spent_total: 0.0, spent: Vec::new(), eval_count: 0 })
    }

    pub fn remaining(&self) -> f64 {
        (self.eta_traj - self.spent_total).max(0.0)
    }

    pub fn spent_total(&self) -> f64 {
        self.spent_total
    }

    pub fn admits(&self, cost: f64) -> bool {
        cost.is_finite() && cost >= 0.0 && self.spent_total + cost <= self.eta_traj
    }

    /// Spends `cost` at step `t` if the gate admits it.
    pub fn try_spend(&mut self, t: usize, cost: f64) -> bool {
        if !self.admits(cost) {
            return false;
        }
        self.spent_total += cost;
        self.spent.push((t, cost));
        true
    }

    pub fn record_eval(&mut self) {
        self.eval_count += 1;
    }

    pub fn reuse_count(&self) -> usize {
        self.spent.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Spent budget `η - B_rem`.
    pub d_hat: f64,
    /// `D̂ / η`, or 0 for a zero or infinite budget.
    pub rho: f64,
}

pub fn certificate_of(ledger: &BudgetLedger) -> Certificate {
    let d_hat = ledger.spent_total;
    let rho = if ledger.eta_traj > 0.0 && ledger.eta_traj.is_finite() { d_hat / ledger.eta_traj } else { 0.0 };
    Certificate { d_hat, rho }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Recompute,
    Reuse,
}

/// One line of the per-step decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub t: usize,
    pub action: Action,
    /// Probe score; absent at `t = T`.
    pub s: Option<f64>,
    /// Bounded cost; absent where reuse is not allowed.
    pub c_hat: Option<f64>,
    #[serde(rename = "B_rem_after")]
    pub b_rem_after: f64,
    /// Step whose recomputation produced the prediction used here.
    pub source_step: usize,
}

/// True reuse error at a reuse step, measured in instrumented mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseError {
    pub t: usize,
    /// `‖ε_eff(τ̃_t) - ε_cache‖_F`.
    pub error_norm: f64,
    /// `Γ L_t ‖e_t‖_F`.
    pub weighted: f64,
    /// Whether `‖e_t‖_F / √(Hd) ≤ U_t(s_t)`.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRunRecord {
    pub output: Trajectory,
    pub certificate: Certificate,
    pub ledger: BudgetLedger,
    /// Ordered `t = T..1`.
    pub decisions: Vec<Decision>,
    /// Populated only in instrumented mode.
    pub reuse_errors: Vec<ReuseError>,
}

impl CachedRunRecord {
    pub fn eval_count(&self) -> usize {
        self.ledger.eval_count
    }

    pub fn reuse_count(&self) -> usize {
        self.ledger.reuse_count()
    }

    /// `Σ Γ L_t ‖e_t‖` over reuse steps (instrumented mode).
    pub fn pathwise_bound(&self) -> f64 {
        self.reuse_errors.iter().map(|r| r.weighted).sum()
    }

    /// No conformal failure at any reuse step (instrumented mode).
    pub fn all_covered(&self) -> bool {
        self.reuse_errors.iter().all(|r| r.covered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeChoice {
    #[default]
    Primary,
    /// The `α / M` envelopes used by multi-sample selection.
    MultiSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallOptions {
    /// Also evaluates the denoiser at reuse steps to record the true error.
    /// Testing only; doubles the cost of reuse steps.
    pub instrumented: bool,
    pub envelopes: EnvelopeChoice,
}

fn envelope_set(artifact: &CalibrationArtifact, choice: EnvelopeChoice) -> Result<&EnvelopeSet> {
    match choice {
        EnvelopeChoice::Primary => Ok(&artifact.primary),
        EnvelopeChoice::MultiSample => artifact
            .multi_sample
            .as_ref()
            .map(|m| &m.set)
            .ok_or_else(|| Error::Incompatible("artifact has no multi-sample envelopes".into())),
    }
}

/// Runs one sampling call under the caching policy.
#[allow(clippy::too_many_arguments)]
pub fn muninn_call(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    artifact: &CalibrationArtifact,
    eta_traj: f64,
    tape: &NoiseTape,
    context: &[f64],
    opts: CallOptions,
) -> Result<CachedRunRecord> {
    artifact.check_compatible(sched, kind, model.shape())?;
    check_tape(sched, tape, model.shape())?;
    let envelopes = envelope_set(artifact, opts.envelopes)?;
    let norm = artifact.label_scale;
    let steps = sched.steps();
    let mut ledger = BudgetLedger::new(eta_traj)?;
    let mut decisions = Vec::with_capacity(steps);
    let mut reuse_errors = Vec::new();

    let mut state = tape.initial().clone();
    let stem = model.stem(&state, steps, context)?;
    let mut prev: ProbeFeature = model.probe_of(&stem, steps);
    let mut cache: NoisePrediction = model.finish(&stem, &state, steps, context)?;
    let mut source = steps;
    ledger.record_eval();
    decisions.push(Decision {
        t: steps,
        action: Action::Recompute,
        s: None,
        c_hat: None,
        b_rem_after: ledger.remaining(),
        source_step: steps,
    });
    state = reverse_step(&state, &cache, steps, sched, kind, tape.xi(steps))?;

    for t in (1..steps).rev() {
        let stem = model.stem(&state, t, context)?;
        let feature = model.probe_of(&stem, t);
        let s = score(&feature, &prev, artifact.omega)?.value;
        let bound = match artifact.eligible.contains(t) {
            true => envelopes.get(t).map(|e| e.evaluate(s)),
            false => None,
        };
        let c_hat = bound.map(|u| step_cost(artifact.profile.pathwise(t), artifact.gamma, norm * u));
        let reuse = c_hat.is_some_and(|c| ledger.try_spend(t, c));

        if reuse {
            if opts.instrumented {
                let truth = model.finish(&stem, &state, t, context)?;
                let error_norm = truth.distance(&cache)?;
                reuse_errors.push(ReuseError {
                    t,
                    error_norm,
                    weighted: artifact.gamma * artifact.profile.pathwise(t) * error_norm,
                    covered: error_norm / norm <= bound.expect("reuse implies a bound"),
                });
            }
        } else {
            cache = model.finish(&stem, &state, t, context)?;
            source = t;
            ledger.record_eval();
        }
        decisions.push(Decision {
            t,
            action: if reuse { Action::Reuse } else { Action::Recompute },
            s: Some(s),
            c_hat,
            b_rem_after: ledger.remaining(),
            source_step: source,
        });
        state = reverse_step(&state, &cache, t, sched, kind, tape.xi(t))?;
        prev = feature;
    }

    Ok(CachedRunRecord { output: state, certificate: certificate_of(&ledger), ledger, decisions, reuse_errors })
}

/// Failure of one batch element.
#[derive(Debug)]
pub struct BatchError {
    pub index: usize,
    pub error: Error,
}

/// Independent calls sharing one artifact, each with its own budget.
#[allow(clippy::too_many_arguments)]
pub fn batched_calls(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    artifact: &CalibrationArtifact,
    eta_traj: f64,
    tapes: &[NoiseTape],
    contexts: &[Vec<f64>],
    opts: CallOptions,
) -> Result<Vec<std::result::Result<CachedRunRecord, BatchError>>> {
    if tapes.len() != contexts.len() {
        return Err(Error::DimensionMismatch { left: tapes.len(), right: contexts.len() });
    }
    Ok(tapes
        .par_iter()
        .zip(contexts.par_iter())
        .enumerate()
        .map(|(index, (tape, ctx))| {
            muninn_call(model, sched, kind, artifact, eta_traj, tape, ctx, opts).map_err(|error| BatchError { index, error })
        })
        .collect())
}

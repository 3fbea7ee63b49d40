use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationArtifact;
use crate::denoiser::Model;
use crate::metrics::{bootstrap_ci, certificate_reliability, deviation, speedup_model, violation_rate, MetricsBundle};
use crate::policy::{muninn_call, CallOptions, Decision};
use crate::sampler::{run_full_chain, NoiseTape};
use crate::schedule::{NoiseSchedule, SamplerKind};
use crate::{Error, Result};

/// Per-decision quantities every evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionStats {
    pub id: usize,
    pub n_eval: usize,
    pub reuse: usize,
    pub d_hat: f64,
    pub rho: f64,
    /// Paired deviation `d(τ_full, τ̃)`; absent when the full rerun is skipped.
    pub d: Option<f64>,
}

/// Aggregation settings shared by paired and closed-loop summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySpec {
    pub label: String,
    pub config_hash: String,
    pub artifact_hash: String,
    pub steps: usize,
    pub alpha: f64,
    pub eta_traj: f64,
    pub probe_cost_ratio: f64,
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Folds decisions into a bundle. Deviation fields are `None` unless every
/// decision carries a paired deviation.
pub fn summarize(stats: &[DecisionStats], spec: &SummarySpec) -> Result<MetricsBundle> {
    if stats.is_empty() {
        return Err(Error::Empty("evaluation with no decisions"));
    }
    let steps = spec.steps as f64;
    let mean_evals = mean(stats.iter().map(|s| s.n_eval as f64));
    let ds: Option<Vec<f64>> = stats.iter().map(|s| s.d).collect();
    let mut bundle = MetricsBundle {
        label: spec.label.clone(),
        config_hash: spec.config_hash.clone(),
        artifact_hash: spec.artifact_hash.clone(),
        steps: spec.steps,
        alpha: spec.alpha,
        eta_traj: spec.eta_traj,
        decisions: stats.len(),
        mean_d: None,
        mean_d_ci_lo: None,
        mean_d_ci_hi: None,
        p_viol: None,
        p_viol_lo: None,
        p_viol_hi: None,
        evals_per_t: mean_evals / steps,
        reuse_frac: mean(stats.iter().map(|s| s.reuse as f64)) / steps,
        mean_evals,
        mean_d_hat: mean(stats.iter().map(|s| s.d_hat)),
        reliability: None,
        probe_cost_ratio: spec.probe_cost_ratio,
        speedup_model: speedup_model(spec.steps, mean_evals, spec.probe_cost_ratio),
        mace: None,
        success_rate: None,
        collision_rate: None,
    };
    if let Some(ds) = ds {
        let ci = bootstrap_ci(&ds, spec.bootstrap_replicates, 0.95, spec.bootstrap_seed)?;
        let viol = violation_rate(&ds, spec.eta_traj)?;
        let pairs: Vec<(f64, f64)> = stats.iter().zip(&ds).map(|(s, d)| (s.d_hat, *d)).collect();
        bundle.mean_d = Some(mean(ds.iter().copied()));
        bundle.mean_d_ci_lo = Some(ci.lo);
        bundle.mean_d_ci_hi = Some(ci.hi);
        bundle.p_viol = Some(viol.p_hat);
        bundle.p_viol_lo = Some(viol.wilson95.lo);
        bundle.p_viol_hi = Some(viol.wilson95.hi);
        bundle.reliability = Some(certificate_reliability(&pairs)?);
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOptions {
    /// Rerun the full chain on each tape to measure `d`.
    pub paired: bool,
    pub call: CallOptions,
}

impl Default for PairedOptions {
    fn default() -> Self {
        Self { paired: true, call: CallOptions::default() }
    }
}

/// One paired decision with its decision trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDecision {
    #[serde(flatten)]
    pub stats: DecisionStats,
    /// Instrumented mode: `Σ Γ L_t ‖e_t‖` over reuse steps.
    pub pathwise_bound: Option<f64>,
    /// Instrumented mode: no conformal failure at any reuse step.
    pub covered: Option<bool>,
    /// Instrumented mode: `(t, ‖e_t‖_F / √(Hd))` at every reuse step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reuse_labels: Vec<(usize, f64)>,
    pub trace: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub decisions: Vec<PairedDecision>,
    pub bundle: MetricsBundle,
}

/// Full-versus-cached evaluation with one decision per episode. Each episode
/// runs both chains on the tape generated from its seed.
#[allow(clippy::too_many_arguments)]
pub fn paired_eval(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    artifact: &CalibrationArtifact,
    eta_traj: f64,
    contexts: &[Vec<f64>],
    tape_seeds: &[u64],
    opts: PairedOptions,
    summary: &SummarySpec,
) -> Result<PairedOutcome> {
    if contexts.is_empty() {
        return Err(Error::Empty("paired evaluation with no episodes"));
    }
    if contexts.len() != tape_seeds.len() {
        return Err(Error::DimensionMismatch { left: contexts.len(), right: tape_seeds.len() });
    }
    let (h, d) = model.shape();
    let decisions: Vec<PairedDecision> = contexts
        .par_iter()
        .zip(tape_seeds.par_iter())
        .enumerate()
        .map(|(id, (ctx, seed))| {
            let tape = NoiseTape::generate(*seed, h, d, sched.steps(), kind.is_stochastic());
            let cached = muninn_call(model, sched, kind, artifact, eta_traj, &tape, ctx, opts.call)?;
            let dev = match opts.paired {
                true => Some(deviation(run_full_chain(model, sched, kind, &tape, ctx)?.output(), &cached.output)?),
                false => None,
            };
            let instrumented = opts.call.instrumented;
            Ok(PairedDecision {
                stats: DecisionStats {
                    id,
                    n_eval: cached.eval_count(),
                    reuse: cached.reuse_count(),
                    d_hat: cached.certificate.d_hat,
                    rho: cached.certificate.rho,
                    d: dev,
                },
                pathwise_bound: instrumented.then(|| cached.pathwise_bound()),
                covered: instrumented.then(|| cached.all_covered()),
                reuse_labels: cached.reuse_errors.iter().map(|e| (e.t, e.error_norm / artifact.label_scale)).collect(),
                trace: cached.decisions,
            })
        })
        .collect::<Result<_>>()?;
    let stats: Vec<DecisionStats> = decisions.iter().map(|p| p.stats.clone()).collect();
    let bundle = summarize(&stats, summary)?;
    Ok(PairedOutcome { decisions, bundle })
}

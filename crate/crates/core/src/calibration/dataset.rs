use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eligible::{anchor_set, EligibleSet};
use crate::denoiser::{score, Model, ProbeFeature};
use crate::metrics::deviation;
use crate::sampler::{reverse_step, run_full_chain, NoiseTape};
use crate::schedule::{NoiseSchedule, SamplerKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub s: f64,
    /// `‖ε̂_full_t - ε̂_cache‖_F / √(Hd)`.
    pub eps: f64,
    pub t: usize,
    pub episode: usize,
}

/// Ghost-chain score/error pairs grouped by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationData {
    pub pairs: BTreeMap<usize, Vec<CalibrationPair>>,
    pub episodes: usize,
    pub failed_episodes: usize,
    /// `d(τ_0^full, τ_0^ghost)` per successful episode, in episode order.
    pub deviations: Vec<f64>,
}

impl CalibrationData {
    pub fn at(&self, t: usize) -> &[CalibrationPair] {
        self.pairs.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }
}

struct EpisodeOutcome {
    pairs: Vec<CalibrationPair>,
    deviation: f64,
}

/// Runs one full chain and one ghost chain on a shared tape. The ghost chain
/// copies the full chain's effective prediction at anchors and otherwise
/// reuses the most recent anchor value.
#[allow(clippy::too_many_arguments)]
fn ghost_episode(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    context: &[f64],
    tape: &NoiseTape,
    eligible: &EligibleSet,
    anchors: &[usize],
    omega: f64,
    episode: usize,
) -> Result<EpisodeOutcome> {
    let steps = sched.steps();
    let full = run_full_chain(model, sched, kind, tape, context)?;
    let (h, d) = model.shape();
    let norm = ((h * d) as f64).sqrt();

    let mut state = tape.initial().clone();
    let mut prev: ProbeFeature = model.probe_of(&model.stem(&state, steps, context)?, steps);
    let mut cache = full.eps(steps).clone();
    state = reverse_step(&state, &cache, steps, sched, kind, tape.xi(steps))?;

    let mut pairs = Vec::with_capacity(eligible.len());
    for t in (1..steps).rev() {
        let feature = model.probe_of(&model.stem(&state, t, context)?, t);
        let s = score(&feature, &prev, omega)?.value;
        if eligible.contains(t) {
            let eps = full.eps(t).distance(&cache)? / norm;
            pairs.push(CalibrationPair { s, eps, t, episode });
        }
        if anchors.binary_search(&t).is_ok() {
            cache = full.eps(t).clone();
        }
        state = reverse_step(&state, &cache, t, sched, kind, tape.xi(t))?;
        prev = feature;
    }
    Ok(EpisodeOutcome { pairs, deviation: deviation(full.output(), &state)? })
}

/// Builds the per-step calibration set from `contexts.len()` episodes, one
/// tape per entry of `tape_seeds`. Failed episodes are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn generate_calibration(
    model: &Model,
    sched: &NoiseSchedule,
    kind: &SamplerKind,
    contexts: &[Vec<f64>],
    tape_seeds: &[u64],
    eligible: &EligibleSet,
    stride: usize,
    omega: f64,
) -> Result<CalibrationData> {
    if contexts.len() != tape_seeds.len() {
        return Err(Error::DimensionMismatch { left: contexts.len(), right: tape_seeds.len() });
    }
    let anchors = anchor_set(sched.steps(), stride, eligible)?;
    let (h, d) = model.shape();
    let outcomes: Vec<Result<EpisodeOutcome>> = contexts
        .par_iter()
        .zip(tape_seeds.par_iter())
        .enumerate()
        .map(|(episode, (context, seed))| {
            let tape = NoiseTape::generate(*seed, h, d, sched.steps(), kind.is_stochastic());
            ghost_episode(model, sched, kind, context, &tape, eligible, &anchors, omega, episode)
        })
        .collect();
    if !outcomes.is_empty() && outcomes.iter().all(|o| o.is_err()) {
        return Err(outcomes.into_iter().find_map(|o| o.err()).expect("nonempty"));
    }

    let mut data = CalibrationData {
        pairs: eligible.members().iter().map(|t| (*t, Vec::new())).collect(),
        episodes: contexts.len(),
        failed_episodes: 0,
        deviations: Vec::new(),
    };
    for outcome in outcomes {
        match outcome {
            Err(_) => data.failed_episodes += 1,
            Ok(o) => {
                data.deviations.push(o.deviation);
                for p in o.pairs {
                    data.pairs.entry(p.t).or_default().push(p);
                }
            }
        }
    }
    Ok(data)
}

/// Ghost-chain versus deployment label distributions at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShift {
    pub t: usize,
    pub n_ghost: usize,
    pub n_deploy: usize,
    pub mean_ghost: f64,
    pub mean_deploy: f64,
    /// Two-sample Kolmogorov-Smirnov statistic.
    pub ks: f64,
}

fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    best
}

/// Compares ghost labels with labels observed at deployment reuse steps,
/// given as `(t, ‖e_t‖_F / √(Hd))`. Steps missing on either side are skipped.
pub fn label_shift(data: &CalibrationData, deployment: &[(usize, f64)]) -> Vec<LabelShift> {
    let mut deploy: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (t, e) in deployment {
        deploy.entry(*t).or_default().push(*e);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    data.pairs
        .iter()
        .filter_map(|(t, pairs)| {
            let mut dep = deploy.get(t)?.clone();
            if pairs.is_empty() {
                return None;
            }
            let mut ghost: Vec<f64> = pairs.iter().map(|p| p.eps).collect();
            Some(LabelShift {
                t: *t,
                n_ghost: ghost.len(),
                n_deploy: dep.len(),
                mean_ghost: mean(&ghost),
                mean_deploy: mean(&dep),
                ks: ks_statistic(&mut ghost, &mut dep),
            })
        })
        .collect()
}

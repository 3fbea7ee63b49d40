use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::paired::{summarize, DecisionStats, SummarySpec};
use super::world::{feasibility_check, to_world, Point, PointMassWorld};
use crate::calibration::CalibrationArtifact;
use crate::denoiser::Model;
use crate::escalation::{
    damp_and_saturate, damping_factor, multi_sample_select, update_state, Candidate, EscalationAction,
    EscalationConfig, EscalationEvent, EscalationState, Mode,
};
use crate::metrics::{deviation, MetricsBundle};
use crate::policy::{muninn_call, CachedRunRecord, CallOptions, EnvelopeChoice};
use crate::sampler::{run_full_chain, NoiseTape, Trajectory};
use crate::schedule::{NoiseSchedule, SamplerKind};
use crate::seeds::{derive, Role};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    Full,
    Muninn,
    Escalated,
}

/// Which escalation interventions are enabled. The mode machine always runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EscalationFeatures {
    pub dampen: bool,
    pub resample: bool,
    pub full: bool,
}

impl EscalationFeatures {
    pub fn all() -> Self {
        Self { dampen: true, resample: true, full: true }
    }
}

/// A sampler plus caching and escalation settings for closed-loop planning.
#[derive(Debug, Clone)]
pub struct Planner<'a> {
    pub model: &'a Model,
    pub sched: &'a NoiseSchedule,
    pub kind: &'a SamplerKind,
    pub artifact: Option<&'a CalibrationArtifact>,
    pub eta_traj: f64,
    pub planner: PlannerKind,
    pub escalation: EscalationConfig,
    pub features: EscalationFeatures,
    /// Rerun the full chain on every decision's tape to measure `d`.
    pub paired: bool,
    /// Decision indices whose deadline is treated as missed.
    pub deadline_faults: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    #[serde(flatten)]
    pub stats: DecisionStats,
    /// Simulation step at which the plan was made.
    pub sim_step: usize,
    pub mode: Option<Mode>,
    pub action: EscalationAction,
    pub plan_feasible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub success: bool,
    pub collision: bool,
    /// Planner error that ended the episode, if any.
    pub failure: Option<String>,
    pub sim_steps: usize,
    pub final_position: Point,
    pub decisions: Vec<DecisionRecord>,
    pub escalation: Vec<EscalationEvent>,
    /// Seconds per decision. Informational; excluded from serialized output.
    #[serde(skip)]
    pub wall_time: Vec<f64>,
}

/// Equality ignores wall time.
impl PartialEq for EpisodeReport {
    fn eq(&self, other: &Self) -> bool {
        self.success == other.success
            && self.collision == other.collision
            && self.failure == other.failure
            && self.sim_steps == other.sim_steps
            && self.final_position == other.final_position
            && self.decisions == other.decisions
            && self.escalation == other.escalation
    }
}

struct Plan {
    offsets: Array2<f64>,
    stats: DecisionStats,
    mode: Option<Mode>,
    action: EscalationAction,
    lambda: f64,
    event: Option<EscalationEvent>,
}

fn cached_call(p: &Planner, tape: &NoiseTape, ctx: &[f64], envelopes: EnvelopeChoice) -> Result<CachedRunRecord> {
    let artifact = p.artifact.ok_or_else(|| Error::InvalidArgument("cached planner needs an artifact".into()))?;
    muninn_call(p.model, p.sched, p.kind, artifact, p.eta_traj, tape, ctx, CallOptions { instrumented: false, envelopes })
}

fn decide(
    p: &Planner,
    world: &PointMassWorld,
    position: Point,
    ctx: &[f64],
    seed: u64,
    decision: usize,
    state: &mut EscalationState,
) -> Result<Plan> {
    let (h, d) = p.model.shape();
    let stochastic = p.kind.is_stochastic();
    let tape = NoiseTape::generate(seed, h, d, p.sched.steps(), stochastic);
    let steps = p.sched.steps();
    let feasible = |tau: &Trajectory| feasibility_check(&to_world(position, tau.values()), world);

    if p.planner == PlannerKind::Full {
        let full = run_full_chain(p.model, p.sched, p.kind, &tape, ctx)?;
        let stats = DecisionStats { id: decision, n_eval: steps, reuse: 0, d_hat: 0.0, rho: 0.0, d: Some(0.0) };
        let offsets = full.output().values().clone();
        return Ok(Plan { offsets, stats, mode: None, action: EscalationAction::Execute, lambda: 1.0, event: None });
    }

    let cached = cached_call(p, &tape, ctx, EnvelopeChoice::Primary)?;
    let mut full_output = None;
    let d_value = match p.paired {
        true => {
            let full = run_full_chain(p.model, p.sched, p.kind, &tape, ctx)?;
            let dev = deviation(full.output(), &cached.output)?;
            full_output = Some(full.output().clone());
            Some(dev)
        }
        false => None,
    };
    let mut stats = DecisionStats {
        id: decision,
        n_eval: cached.eval_count(),
        reuse: cached.reuse_count(),
        d_hat: cached.certificate.d_hat,
        rho: cached.certificate.rho,
        d: d_value,
    };
    let rho = cached.certificate.rho;
    let mut offsets = cached.output.values().clone();
    if p.planner == PlannerKind::Muninn {
        return Ok(Plan { offsets, stats, mode: None, action: EscalationAction::Execute, lambda: 1.0, event: None });
    }

    let cfg = &p.escalation;
    let (next, mode) = update_state(*state, rho, cfg);
    *state = next;
    let mut action = EscalationAction::Execute;
    let mut lambda = 1.0;
    let mut selected = None;
    let mut m = 0;
    let mut override_full = p.features.full && mode == Mode::FullOverride;

    if p.features.resample && mode == Mode::Resample {
        m = cfg.candidates;
        let mut candidates = Vec::with_capacity(m);
        for k in 0..m {
            let cand_tape = NoiseTape::generate(derive(seed, Role::Candidate, k as u64), h, d, steps, stochastic);
            let rec = cached_call(p, &cand_tape, ctx, EnvelopeChoice::MultiSample)?;
            stats.n_eval += rec.eval_count();
            let ok = feasible(&rec.output);
            candidates.push(Candidate { plan: rec.output, certificate: rec.certificate, feasible: ok });
        }
        selected = multi_sample_select(&candidates)?;
        match selected {
            Some(i) => {
                offsets = candidates.swap_remove(i).plan.into_values();
                action = EscalationAction::Resample;
            }
            None => override_full = p.features.full,
        }
    }
    if override_full {
        let full = match full_output {
            Some(f) => f,
            None => run_full_chain(p.model, p.sched, p.kind, &tape, ctx)?.output().clone(),
        };
        stats.n_eval += steps;
        offsets = full.into_values();
        action = EscalationAction::FullOverride;
    } else if p.features.dampen && matches!(mode, Mode::Warn | Mode::Resample) {
        lambda = damping_factor(mode, rho, cfg);
        if action == EscalationAction::Execute {
            action = EscalationAction::Damp;
        }
    }
    if p.deadline_faults.contains(&decision) {
        action = EscalationAction::Hold;
        lambda = 0.0;
    }
    let event = EscalationEvent { call: decision, rho, mode, action, m, selected };
    Ok(Plan { offsets, stats, mode: Some(mode), action, lambda, event: Some(event) })
}

/// Receding-horizon episode: plan from the current position, execute the
/// first `replan_every` position deltas of the plan, repeat until the goal
/// ball is entered, a collision occurs, or the step limit is reached.
pub fn rollout_closed_loop(
    world: &PointMassWorld,
    planner: &Planner,
    replan_every: usize,
    tape_seed: u64,
) -> Result<EpisodeReport> {
    let (h, d) = planner.model.shape();
    if d != 2 || planner.model.context_dim() != 4 {
        return Err(Error::InvalidArgument("point-mass planner needs d = 2 and a 4-dim context".into()));
    }
    if replan_every == 0 || replan_every > h {
        return Err(Error::InvalidArgument(format!("replan_every must lie in 1..={h}, got {replan_every}")));
    }
    let limits = [world.control_limit; 2];
    let mut report = EpisodeReport {
        success: false,
        collision: false,
        failure: None,
        sim_steps: 0,
        final_position: world.start,
        decisions: Vec::new(),
        escalation: Vec::new(),
        wall_time: Vec::new(),
    };
    let mut pos = world.start;
    let mut state = EscalationState::default();

    'episode: for decision in 0.. {
        if report.sim_steps >= world.step_limit || world.reached_goal(pos) {
            break;
        }
        let ctx = [pos[0], pos[1], world.goal[0], world.goal[1]];
        let seed = derive(tape_seed, Role::Tape, decision as u64);
        let clock = Instant::now();
        let plan = match decide(planner, world, pos, &ctx, seed, decision, &mut state) {
            Ok(plan) => plan,
            Err(e) => {
                report.failure = Some(e.to_string());
                break;
            }
        };
        report.wall_time.push(clock.elapsed().as_secs_f64());
        report.decisions.push(DecisionRecord {
            plan_feasible: feasibility_check(&to_world(pos, &plan.offsets), world),
            stats: plan.stats,
            sim_step: report.sim_steps,
            mode: plan.mode,
            action: plan.action,
        });
        report.escalation.extend(plan.event);

        let mut prev = [0.0, 0.0];
        for row in plan.offsets.rows().into_iter().take(replan_every) {
            let nominal = [row[0] - prev[0], row[1] - prev[1]];
            prev = [row[0], row[1]];
            let u = damp_and_saturate(&nominal, plan.lambda, &limits)?;
            let next = [pos[0] + u[0], pos[1] + u[1]];
            report.sim_steps += 1;
            if !feasibility_check(&[pos, next], world) {
                report.collision = true;
                pos = next;
                break 'episode;
            }
            pos = next;
            if world.reached_goal(pos) {
                report.success = true;
                break 'episode;
            }
            if report.sim_steps >= world.step_limit {
                break 'episode;
            }
        }
    }
    report.final_position = pos;
    Ok(report)
}

/// Bundle over all decisions of all episodes, with task success and
/// collision rates per episode.
pub fn summarize_episodes(reports: &[EpisodeReport], spec: &SummarySpec) -> Result<MetricsBundle> {
    if reports.is_empty() {
        return Err(Error::Empty("closed-loop evaluation with no episodes"));
    }
    let stats: Vec<DecisionStats> = reports.iter().flat_map(|r| r.decisions.iter().map(|d| d.stats.clone())).collect();
    let mut bundle = summarize(&stats, spec)?;
    let n = reports.len() as f64;
    bundle.success_rate = Some(reports.iter().filter(|r| r.success).count() as f64 / n);
    bundle.collision_rate = Some(reports.iter().filter(|r| r.collision).count() as f64 / n);
    Ok(bundle)
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{resolve_eta, Experiment, ExperimentConfig, TaskInstance};
use crate::calibration::{
    build_artifact, eligible_timesteps, generate_calibration, label_shift, load_artifact, save_artifact, ArtifactSpec,
    CalibrationArtifact, CalibrationData,
};
use crate::escalation::{
    multi_sample_select, update_state, Candidate, EscalationAction, EscalationEvent, EscalationState, Mode,
};
use crate::metrics::{mace, MetricsBundle, ALPHA_TARGETS};
use crate::policy::{muninn_call, CallOptions, EnvelopeChoice};
use crate::sampler::{run_full_chain, NoiseTape, Trajectory};
use crate::seeds::{derive, Role};
use crate::testbed::{
    paired_eval, rollout_closed_loop, summarize_episodes, EpisodeReport, EscalationFeatures, PairedDecision,
    PairedOptions, PairedOutcome, Planner, PlannerKind, SummarySpec,
};
use crate::{Error, Result};

pub const ARTIFACT_FILE: &str = "artifact.munn";
pub const METRICS_FILE: &str = "metrics.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_csv(path: &Path, bundles: &[MetricsBundle]) -> Result<()> {
    let mut text = String::from(MetricsBundle::CSV_HEADER);
    text.push('\n');
    for b in bundles {
        text.push_str(&b.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Ghost-chain data for the configured calibration episodes.
pub fn calibration_data(exp: &Experiment) -> Result<CalibrationData> {
    let c = &exp.config.calibration;
    let eligible = eligible_timesteps(exp.sched.steps(), c.frac_pre, c.frac_suf)?;
    let (contexts, seeds) = exp.calibration_inputs()?;
    generate_calibration(&exp.model, &exp.sched, &exp.kind, &contexts, &seeds, &eligible, c.anchor_stride, c.omega)
}

/// Artifact at risk `alpha`, including the multi-sample envelopes.
pub fn artifact_from_data(exp: &Experiment, data: &CalibrationData, alpha: f64) -> Result<CalibrationArtifact> {
    let c = &exp.config.calibration;
    let (h, d) = exp.model.shape();
    let spec = ArtifactSpec {
        horizon: h,
        dim: d,
        schedule: exp.sched.clone(),
        kind: exp.kind,
        gamma: exp.config.gamma(),
        omega: c.omega,
        eligible: eligible_timesteps(exp.sched.steps(), c.frac_pre, c.frac_suf)?,
        tape_seed: exp.config.seeds.calibration_tape,
        anchor_stride: c.anchor_stride,
        config_hash: exp.config.hash(),
    };
    build_artifact(data, spec, alpha, exp.config.seeds.split)?.with_multi_sample(data, exp.config.escalation.candidates)
}

#[derive(Debug, Serialize)]
struct StepSummary {
    t: usize,
    pairs: usize,
    n_train: Option<usize>,
    n_cal: Option<usize>,
    q: Option<f64>,
    score_min: Option<f64>,
    score_max: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CalibrationSummary {
    config_hash: String,
    artifact_hash: String,
    episodes: usize,
    failed_episodes: usize,
    alpha: f64,
    alpha_step: f64,
    eligible: Vec<usize>,
    forbidden: Vec<usize>,
    steps: Vec<StepSummary>,
}

fn calibration_summary(artifact: &CalibrationArtifact, data: &CalibrationData) -> Result<CalibrationSummary> {
    let steps = artifact
        .eligible
        .members()
        .iter()
        .map(|&t| {
            let pairs = data.at(t);
            let env = artifact.envelope(t);
            let scores = pairs.iter().map(|p| p.s);
            StepSummary {
                t,
                pairs: pairs.len(),
                n_train: env.map(|e| e.n_train),
                n_cal: env.map(|e| e.n_cal),
                q: env.map(|e| e.q),
                score_min: scores.clone().reduce(f64::min),
                score_max: scores.reduce(f64::max),
            }
        })
        .collect();
    Ok(CalibrationSummary {
        config_hash: artifact.provenance.config_hash.clone(),
        artifact_hash: artifact.hash()?,
        episodes: data.episodes,
        failed_episodes: data.failed_episodes,
        alpha: artifact.primary.alpha,
        alpha_step: artifact.primary.alpha_step,
        eligible: artifact.eligible.members().to_vec(),
        forbidden: artifact.primary.forbidden.clone(),
        steps,
    })
}

/// Builds and writes the artifact, its JSON export and a per-step summary.
pub fn cmd_calibrate(config: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let exp = Experiment::build(ExperimentConfig::load(config)?)?;
    let dir = output_dir(&exp.config, out)?;
    let data = calibration_data(&exp)?;
    let artifact = artifact_from_data(&exp, &data, exp.config.calibration.alpha)?;
    let path = dir.join(ARTIFACT_FILE);
    save_artifact(&artifact, &path)?;
    fs::write(dir.join("artifact.json"), artifact.to_json()? + "\n")?;
    write_json(&dir.join("calibration_summary.json"), &calibration_summary(&artifact, &data)?)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationMode {
    #[default]
    Off,
    Dampen,
    Resample,
    Full,
    Combined,
}

impl EscalationMode {
    pub fn features(self) -> Option<EscalationFeatures> {
        let none = EscalationFeatures::default();
        match self {
            Self::Off => None,
            Self::Dampen => Some(EscalationFeatures { dampen: true, ..none }),
            Self::Resample => Some(EscalationFeatures { resample: true, ..none }),
            Self::Full => Some(EscalationFeatures { full: true, ..none }),
            Self::Combined => Some(EscalationFeatures::all()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    pub episodes: Option<usize>,
    pub seed_offset: u64,
    pub escalation: EscalationMode,
    pub paired: bool,
    pub instrumented: bool,
    pub out: Option<PathBuf>,
}

/// What an evaluation produced, and whether the configured gate passed.
#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub dir: PathBuf,
    pub bundles: Vec<MetricsBundle>,
    pub gate_passed: bool,
}

fn load_compatible(exp: &Experiment, artifact_path: &Path) -> Result<CalibrationArtifact> {
    let artifact = load_artifact(artifact_path).map_err(|e| match e {
        Error::Io(io) => Error::Io(io),
        other => Error::Incompatible(format!("{}: {other}", artifact_path.display())),
    })?;
    artifact.check_compatible(&exp.sched, &exp.kind, exp.model.shape())?;
    Ok(artifact)
}

fn summary_spec(exp: &Experiment, artifact: &CalibrationArtifact, label: &str, eta: f64) -> Result<SummarySpec> {
    Ok(SummarySpec {
        label: label.to_string(),
        config_hash: exp.config.hash(),
        artifact_hash: artifact.hash()?,
        steps: exp.sched.steps(),
        alpha: artifact.primary.alpha,
        eta_traj: eta,
        probe_cost_ratio: exp.model.probe_cost_ratio(),
        bootstrap_replicates: exp.config.evaluation.bootstrap_replicates,
        bootstrap_seed: exp.config.seeds.bootstrap,
    })
}

/// Generic trajectories pass the screen when finite and inside a box wide
/// enough for the task prior.
fn generic_feasible(exp: &Experiment, tau: &Trajectory) -> bool {
    let t = &exp.config.task;
    let bound = t.amplitude.abs() + t.context_scale + 6.0 * t.variance.sqrt() + 1.0;
    tau.values().iter().all(|v| v.is_finite() && v.abs() <= bound)
}

/// Runs the mode machine over the evaluation calls in order, treating them
/// as one control loop. Resampling draws candidates on derived tapes with the
/// `α / M` envelopes; override reruns the full chain.
fn escalation_stream(
    exp: &Experiment,
    artifact: &CalibrationArtifact,
    eta: f64,
    outcome: &PairedOutcome,
    inputs: (&[Vec<f64>], &[u64]),
    features: EscalationFeatures,
) -> Result<Vec<EscalationEvent>> {
    let cfg = &exp.config.escalation;
    let (h, d) = exp.model.shape();
    let mut state = EscalationState::default();
    let mut events = Vec::with_capacity(outcome.decisions.len());
    for (call, dec) in outcome.decisions.iter().enumerate() {
        let rho = dec.stats.rho;
        let (next, mode) = update_state(state, rho, cfg);
        state = next;
        let (ctx, seed) = (&inputs.0[call], inputs.1[call]);
        let mut action = EscalationAction::Execute;
        let (mut m, mut selected) = (0, None);
        let mut override_full = features.full && mode == Mode::FullOverride;
        if features.resample && mode == Mode::Resample {
            m = cfg.candidates;
            let candidates: Vec<Candidate<()>> = (0..m as u64)
                .into_par_iter()
                .map(|k| {
                    let steps = exp.sched.steps();
                    let tape = NoiseTape::generate(derive(seed, Role::Candidate, k), h, d, steps, exp.kind.is_stochastic());
                    let opts = CallOptions { instrumented: false, envelopes: EnvelopeChoice::MultiSample };
                    let rec = muninn_call(&exp.model, &exp.sched, &exp.kind, artifact, eta, &tape, ctx, opts)?;
                    Ok(Candidate { plan: (), certificate: rec.certificate, feasible: generic_feasible(exp, &rec.output) })
                })
                .collect::<Result<_>>()?;
            selected = multi_sample_select(&candidates)?;
            match selected {
                Some(_) => action = EscalationAction::Resample,
                None => override_full = features.full,
            }
        }
        if override_full {
            let tape = NoiseTape::generate(seed, h, d, exp.sched.steps(), exp.kind.is_stochastic());
            run_full_chain(&exp.model, &exp.sched, &exp.kind, &tape, ctx)?;
            action = EscalationAction::FullOverride;
        } else if features.dampen && matches!(mode, Mode::Warn | Mode::Resample) && action == EscalationAction::Execute {
            action = EscalationAction::Damp;
        }
        events.push(EscalationEvent { call, rho, mode, action, m, selected });
    }
    Ok(events)
}

#[derive(Debug, Serialize)]
struct TraceLine<'a> {
    episode: usize,
    #[serde(flatten)]
    decision: &'a crate::policy::Decision,
}

#[derive(Debug, Serialize)]
struct EpisodeLine<'a> {
    #[serde(flatten)]
    stats: &'a crate::testbed::DecisionStats,
    pathwise_bound: Option<f64>,
    covered: Option<bool>,
}

fn episode_lines(decisions: &[PairedDecision]) -> impl Iterator<Item = EpisodeLine<'_>> {
    decisions.iter().map(|p| EpisodeLine { stats: &p.stats, pathwise_bound: p.pathwise_bound, covered: p.covered })
}

#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    config_hash: String,
    artifact_hash: String,
    eta_traj: f64,
    alpha: f64,
    episodes: usize,
    seed_offset: u64,
    escalation: EscalationMode,
    paired: bool,
    bundles: &'a [MetricsBundle],
}

fn closed_loop(
    exp: &Experiment,
    artifact: &CalibrationArtifact,
    eta: f64,
    inputs: (&[Vec<f64>], &[u64]),
    opts: &EvaluateOptions,
) -> Result<(Vec<EpisodeReport>, Vec<EpisodeReport>)> {
    let TaskInstance::PointMass { world, .. } = &exp.task else {
        return Err(Error::Config("closed-loop evaluation needs the point_mass task".into()));
    };
    let features = opts.escalation.features();
    let planner = |kind: PlannerKind| Planner {
        model: &exp.model,
        sched: &exp.sched,
        kind: &exp.kind,
        artifact: Some(artifact),
        eta_traj: eta,
        planner: kind,
        escalation: exp.config.escalation.clone(),
        features: features.unwrap_or_default(),
        paired: opts.paired,
        deadline_faults: Vec::new(),
    };
    let full = planner(PlannerKind::Full);
    let cached = planner(if features.is_some() { PlannerKind::Escalated } else { PlannerKind::Muninn });
    let replan = exp.config.task.replan_every;
    let run = |p: &Planner| -> Result<Vec<EpisodeReport>> {
        inputs
            .0
            .par_iter()
            .zip(inputs.1.par_iter())
            .map(|(ctx, seed)| {
                let mut w = world.clone();
                w.start = [ctx[0], ctx[1]];
                w.goal = [ctx[2], ctx[3]];
                rollout_closed_loop(&w, p, replan, *seed)
            })
            .collect()
    };
    Ok((run(&full)?, run(&cached)?))
}

#[derive(Debug, Default, Serialize)]
struct Timing {
    note: &'static str,
    seconds_per_decision_full: Option<f64>,
    seconds_per_decision_cached: Option<f64>,
}

fn mean_wall(reports: &[EpisodeReport]) -> Option<f64> {
    let all: Vec<f64> = reports.iter().flat_map(|r| r.wall_time.iter().copied()).collect();
    (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
}

/// Paired evaluation plus, when configured, closed-loop episodes.
pub fn cmd_evaluate(config: &Path, artifact_path: &Path, opts: &EvaluateOptions) -> Result<EvaluateOutcome> {
    let exp = Experiment::build(ExperimentConfig::load(config)?)?;
    let artifact = load_compatible(&exp, artifact_path)?;
    let dir = output_dir(&exp.config, opts.out.as_deref())?;
    let eta = resolve_eta(&exp.config.policy, &artifact.provenance.deviations)?;
    let n = opts.episodes.unwrap_or(exp.config.evaluation.episodes);
    let (contexts, seeds) = exp.evaluation_inputs(opts.seed_offset, n)?;
    let paired_opts = PairedOptions {
        paired: opts.paired,
        call: CallOptions { instrumented: opts.instrumented, envelopes: EnvelopeChoice::Primary },
    };
    let spec = summary_spec(&exp, &artifact, "paired", eta)?;
    let outcome = paired_eval(&exp.model, &exp.sched, &exp.kind, &artifact, eta, &contexts, &seeds, paired_opts, &spec)?;
    let mut bundles = vec![outcome.bundle.clone()];

    let events = match opts.escalation.features() {
        Some(f) if !exp.config.evaluation.closed_loop => {
            escalation_stream(&exp, &artifact, eta, &outcome, (&contexts, &seeds), f)?
        }
        _ => Vec::new(),
    };
    let mut timing = Timing { note: "process wall time; informational only", ..Timing::default() };
    let mut loop_events = Vec::new();
    if exp.config.evaluation.closed_loop {
        let (full, cached) = closed_loop(&exp, &artifact, eta, (&contexts, &seeds), opts)?;
        bundles.push(summarize_episodes(&full, &summary_spec(&exp, &artifact, "closed_loop_full", eta)?)?);
        bundles.push(summarize_episodes(&cached, &summary_spec(&exp, &artifact, "closed_loop_cached", eta)?)?);
        timing.seconds_per_decision_full = mean_wall(&full);
        timing.seconds_per_decision_cached = mean_wall(&cached);
        for (episode, r) in cached.iter().enumerate() {
            loop_events.extend(r.escalation.iter().map(|e| (episode, e.clone())));
        }
        write_jsonl(&dir.join("closed_loop_full.jsonl"), &full)?;
        write_jsonl(&dir.join("closed_loop_cached.jsonl"), &cached)?;
    }

    write_json(&dir.join(METRICS_FILE), &bundles)?;
    write_csv(&dir.join("metrics.csv"), &bundles)?;
    write_jsonl(
        &dir.join("decisions.jsonl"),
        outcome.decisions.iter().flat_map(|p| p.trace.iter().map(move |d| TraceLine { episode: p.stats.id, decision: d })),
    )?;
    write_jsonl(&dir.join(EPISODES_FILE), episode_lines(&outcome.decisions))?;
    if loop_events.is_empty() {
        write_jsonl(&dir.join("escalation.jsonl"), &events)?;
    } else {
        #[derive(Serialize)]
        struct LoopEvent<'a> {
            episode: usize,
            #[serde(flatten)]
            event: &'a EscalationEvent,
        }
        write_jsonl(&dir.join("escalation.jsonl"), loop_events.iter().map(|(episode, event)| LoopEvent { episode: *episode, event }))?;
    }
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            config_hash: exp.config.hash(),
            artifact_hash: artifact.hash()?,
            eta_traj: eta,
            alpha: artifact.primary.alpha,
            episodes: n,
            seed_offset: opts.seed_offset,
            escalation: opts.escalation,
            paired: opts.paired,
            bundles: &bundles,
        },
    )?;
    if opts.instrumented {
        let deployed: Vec<(usize, f64)> = outcome.decisions.iter().flat_map(|p| p.reuse_labels.iter().copied()).collect();
        write_json(&dir.join("label_shift.json"), &label_shift(&calibration_data(&exp)?, &deployed))?;
    }
    write_json(&dir.join("timing.json"), &timing)?;

    let gate_passed = match (exp.config.evaluation.max_violation_rate, outcome.bundle.p_viol) {
        (Some(max), Some(p)) => p <= max,
        _ => true,
    };
    Ok(EvaluateOutcome { dir, bundles, gate_passed })
}

/// Sweep points: budgets reuse one artifact, risk levels rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepSpec {
    Eta(Vec<f64>),
    Alpha(Vec<f64>),
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub artifact: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub seed_offset: u64,
    pub paired: bool,
    pub out: Option<PathBuf>,
}

fn sweep_point(
    exp: &Experiment,
    artifact: &CalibrationArtifact,
    eta: f64,
    label: String,
    inputs: (&[Vec<f64>], &[u64]),
    paired: bool,
    dir: &Path,
) -> Result<MetricsBundle> {
    let opts = PairedOptions { paired, call: CallOptions::default() };
    let spec = summary_spec(exp, artifact, &label, eta)?;
    let outcome = paired_eval(&exp.model, &exp.sched, &exp.kind, artifact, eta, inputs.0, inputs.1, opts, &spec)?;
    fs::create_dir_all(dir)?;
    write_json(&dir.join(METRICS_FILE), &[&outcome.bundle])?;
    write_jsonl(&dir.join(EPISODES_FILE), episode_lines(&outcome.decisions))?;
    Ok(outcome.bundle)
}

/// One bundle per sweep point plus a combined CSV. Risk sweeps covering all
/// target levels also report MACE.
pub fn cmd_sweep(config: &Path, sweep: &SweepSpec, opts: &SweepOptions) -> Result<Vec<MetricsBundle>> {
    let exp = Experiment::build(ExperimentConfig::load(config)?)?;
    let dir = output_dir(&exp.config, opts.out.as_deref())?;
    let n = opts.episodes.unwrap_or(exp.config.evaluation.episodes);
    let (contexts, seeds) = exp.evaluation_inputs(opts.seed_offset, n)?;
    let inputs = (contexts.as_slice(), seeds.as_slice());
    let mut bundles = Vec::new();
    match sweep {
        SweepSpec::Eta(etas) => {
            if etas.is_empty() {
                return Err(Error::Config("empty eta sweep".into()));
            }
            let artifact = match &opts.artifact {
                Some(path) => load_compatible(&exp, path)?,
                None => artifact_from_data(&exp, &calibration_data(&exp)?, exp.config.calibration.alpha)?,
            };
            for (i, eta) in etas.iter().enumerate() {
                let point = dir.join(format!("point_{i:02}"));
                bundles.push(sweep_point(&exp, &artifact, *eta, format!("eta={eta}"), inputs, opts.paired, &point)?);
            }
        }
        SweepSpec::Alpha(alphas) => {
            if alphas.is_empty() {
                return Err(Error::Config("empty alpha sweep".into()));
            }
            let data = calibration_data(&exp)?;
            for (i, alpha) in alphas.iter().enumerate() {
                let artifact = artifact_from_data(&exp, &data, *alpha)?;
                let eta = resolve_eta(&exp.config.policy, &artifact.provenance.deviations)?;
                let point = dir.join(format!("point_{i:02}"));
                save_artifact(&artifact, &{
                    fs::create_dir_all(&point)?;
                    point.join(ARTIFACT_FILE)
                })?;
                bundles.push(sweep_point(&exp, &artifact, eta, format!("alpha={alpha}"), inputs, opts.paired, &point)?);
            }
            let realized: Option<Vec<(f64, f64)>> = bundles.iter().map(|b| b.p_viol.map(|p| (b.alpha, p))).collect();
            if let Some(Ok(value)) = realized.map(|r| mace(&r, &ALPHA_TARGETS)) {
                for b in &mut bundles {
                    b.mace = Some(value);
                }
                for (i, b) in bundles.iter().enumerate() {
                    write_json(&dir.join(format!("point_{i:02}")).join(METRICS_FILE), &[b])?;
                }
            }
        }
    }
    write_csv(&dir.join("sweep.csv"), &bundles)?;
    Ok(bundles)
}

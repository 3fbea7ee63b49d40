use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{AnalyticGaussianDenoiser, Guidance, Model, TinyMlpConfig, TinyMlpDenoiser};
use crate::escalation::EscalationConfig;
use crate::metrics::quantile_sorted;
use crate::schedule::{make_cosine_schedule, make_linear_schedule, NoiseSchedule, SamplerKind, SigmaRule, Variant};
use crate::seeds::{derive, Role};
use crate::testbed::{tape_seeds, GaussianTrajectoryTask, PointMassWorld, WaypointPrior};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    #[serde(default = "defaults::beta_min")]
    pub beta_min: f64,
    #[serde(default = "defaults::beta_max")]
    pub beta_max: f64,
    #[serde(default = "defaults::cosine_offset")]
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub variant: Variant,
    /// DDIM stochasticity.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub sigma_rule: SigmaRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Gaussian,
    PointMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub horizon: usize,
    /// Channel count; fixed to 2 for the point-mass task.
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    /// Data variance `ς²` of the Gaussian prior.
    #[serde(default = "defaults::variance")]
    pub variance: f64,
    #[serde(default = "defaults::context_scale")]
    pub context_scale: f64,
    #[serde(default = "defaults::amplitude")]
    pub amplitude: f64,
    /// World file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    #[serde(default = "defaults::step_len")]
    pub step_len: f64,
    #[serde(default = "defaults::margin")]
    pub margin: f64,
    #[serde(default = "defaults::replan_every")]
    pub replan_every: usize,
    #[serde(default = "defaults::min_separation")]
    pub min_separation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Analytic,
    TinyMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub kind: DenoiserKind,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "defaults::width")]
    pub width: usize,
    /// Classifier-free guidance weight against an all-zero null context.
    #[serde(default)]
    pub guidance_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "defaults::calibration_episodes")]
    pub episodes: usize,
    #[serde(default = "defaults::fraction")]
    pub frac_pre: f64,
    #[serde(default = "defaults::fraction")]
    pub frac_suf: f64,
    #[serde(default = "defaults::anchor_stride")]
    pub anchor_stride: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::omega")]
    pub omega: f64,
    /// Metric constant; `1/√H` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// Fixed deviation budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_traj: Option<f64>,
    /// Budget as a quantile of the calibration-time ghost deviations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_quantile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "defaults::evaluation_episodes")]
    pub episodes: usize,
    #[serde(default = "defaults::bootstrap_replicates")]
    pub bootstrap_replicates: usize,
    /// Also run receding-horizon episodes (point-mass task only).
    #[serde(default)]
    pub closed_loop: bool,
    /// Exit with the gating code when the violation rate exceeds this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_violation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    #[serde(default = "defaults::seed_calibration_tape")]
    pub calibration_tape: u64,
    #[serde(default = "defaults::seed_calibration_context")]
    pub calibration_context: u64,
    #[serde(default)]
    pub split: u64,
    #[serde(default = "defaults::seed_evaluation_tape")]
    pub evaluation_tape: u64,
    #[serde(default = "defaults::seed_evaluation_context")]
    pub evaluation_context: u64,
    #[serde(default = "defaults::seed_weights")]
    pub weights: u64,
    #[serde(default = "defaults::seed_bootstrap")]
    pub bootstrap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::output_dir")]
    pub dir: PathBuf,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub task: TaskSection,
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub escalation: EscalationConfig,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub output: OutputSection,
}

mod defaults {
    use std::path::PathBuf;

    pub fn beta_min() -> f64 {
        1e-4
    }
    pub fn beta_max() -> f64 {
        0.02
    }
    pub fn cosine_offset() -> f64 {
        0.008
    }
    pub fn dim() -> usize {
        2
    }
    pub fn variance() -> f64 {
        0.25
    }
    pub fn context_scale() -> f64 {
        0.5
    }
    pub fn amplitude() -> f64 {
        1.0
    }
    pub fn step_len() -> f64 {
        0.5
    }
    pub fn margin() -> f64 {
        0.2
    }
    pub fn replan_every() -> usize {
        4
    }
    pub fn min_separation() -> f64 {
        3.0
    }
    pub fn embed_dim() -> usize {
        8
    }
    pub fn bottleneck() -> usize {
        4
    }
    pub fn width() -> usize {
        128
    }
    pub fn calibration_episodes() -> usize {
        256
    }
    pub fn fraction() -> f64 {
        0.10
    }
    pub fn anchor_stride() -> usize {
        4
    }
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn omega() -> f64 {
        crate::denoiser::DEFAULT_OMEGA
    }
    pub fn evaluation_episodes() -> usize {
        150
    }
    pub fn bootstrap_replicates() -> usize {
        10_000
    }
    pub fn seed_calibration_tape() -> u64 {
        1
    }
    pub fn seed_calibration_context() -> u64 {
        2
    }
    pub fn seed_evaluation_tape() -> u64 {
        3
    }
    pub fn seed_evaluation_context() -> u64 {
        4
    }
    pub fn seed_weights() -> u64 {
        5
    }
    pub fn seed_bootstrap() -> u64 {
        6
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs/default")
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            episodes: defaults::calibration_episodes(),
            frac_pre: defaults::fraction(),
            frac_suf: defaults::fraction(),
            anchor_stride: defaults::anchor_stride(),
            alpha: defaults::alpha(),
            omega: defaults::omega(),
            gamma: None,
        }
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { eta_traj: None, eta_quantile: Some(0.5) }
    }
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            episodes: defaults::evaluation_episodes(),
            bootstrap_replicates: defaults::bootstrap_replicates(),
            closed_loop: false,
            max_violation_rate: None,
        }
    }
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            calibration_tape: defaults::seed_calibration_tape(),
            calibration_context: defaults::seed_calibration_context(),
            split: 0,
            evaluation_tape: defaults::seed_evaluation_tape(),
            evaluation_context: defaults::seed_evaluation_context(),
            weights: defaults::seed_weights(),
            bootstrap: defaults::seed_bootstrap(),
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: defaults::output_dir() }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a file; a relative world path is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(world), Some(dir)) = (cfg.task.world.as_mut(), path.parent()) {
            if world.is_relative() {
                *world = dir.join(&*world);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical form, excluding the output location so
    /// that reruns into different directories share lineage.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputSection::default();
        let text = canonical.to_toml().expect("validated config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schedule.steps < 2 {
            return bad("schedule.steps must be >= 2".into());
        }
        if self.task.horizon == 0 || self.task.dim == 0 {
            return bad("task.horizon and task.dim must be positive".into());
        }
        if self.task.kind == TaskKind::PointMass {
            if self.task.dim != 2 {
                return bad("point_mass task needs dim = 2".into());
            }
            if self.task.world.is_none() {
                return bad("point_mass task needs task.world".into());
            }
            if self.task.replan_every == 0 || self.task.replan_every > self.task.horizon {
                return bad("task.replan_every must lie in 1..=horizon".into());
            }
        }
        if self.evaluation.closed_loop && self.task.kind != TaskKind::PointMass {
            return bad("evaluation.closed_loop needs the point_mass task".into());
        }
        let c = &self.calibration;
        if !(c.alpha > 0.0 && c.alpha <= 1.0) {
            return bad(format!("calibration.alpha {} outside (0, 1]", c.alpha));
        }
        if !(c.omega > 0.0) || c.anchor_stride == 0 || c.episodes == 0 {
            return bad("calibration.omega, anchor_stride and episodes must be positive".into());
        }
        if c.gamma.is_some_and(|g| !(g > 0.0)) {
            return bad("calibration.gamma must be positive".into());
        }
        match (self.policy.eta_traj, self.policy.eta_quantile) {
            (Some(e), None) if e >= 0.0 => {}
            (None, Some(q)) if (0.0..=1.0).contains(&q) => {}
            _ => return bad("policy needs exactly one of eta_traj (>= 0) or eta_quantile (in [0, 1])".into()),
        }
        if self.evaluation.bootstrap_replicates == 0 {
            return bad("evaluation.bootstrap_replicates must be positive".into());
        }
        self.sampler_kind()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.escalation.validate()?;
        let s = &self.seeds;
        let seeds = [
            s.calibration_tape,
            s.calibration_context,
            s.evaluation_tape,
            s.evaluation_context,
            s.weights,
            s.bootstrap,
        ];
        for (i, a) in seeds.iter().enumerate() {
            if seeds[i + 1..].contains(a) {
                return bad(format!("seed {a} is used for more than one role"));
            }
        }
        Ok(())
    }

    pub fn sampler_kind(&self) -> Result<SamplerKind> {
        let kind = match self.sampler.variant {
            Variant::Ddpm => SamplerKind::ddpm(self.sampler.sigma_rule),
            Variant::Ddim => SamplerKind::ddim(self.sampler.eta),
        };
        Ok(kind)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        match s.kind {
            ScheduleKind::Linear => make_linear_schedule(s.steps, s.beta_min, s.beta_max),
            ScheduleKind::Cosine => make_cosine_schedule(s.steps, s.offset),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.calibration.gamma.unwrap_or(1.0 / (self.task.horizon as f64).sqrt())
    }
}

/// The task's context source.
#[derive(Debug, Clone)]
pub enum TaskInstance {
    Gaussian(Arc<GaussianTrajectoryTask>),
    PointMass { world: PointMassWorld, prior: Arc<WaypointPrior> },
}

/// Everything built from a config: schedule, sampler, model and task.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub sched: NoiseSchedule,
    pub kind: SamplerKind,
    pub model: Model,
    pub task: TaskInstance,
}

impl Experiment {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let sched = config.schedule()?;
        let kind = config.sampler_kind()?;
        let t = &config.task;
        let (task, mean_model): (TaskInstance, Arc<dyn crate::denoiser::MeanModel>) = match t.kind {
            TaskKind::Gaussian => {
                let task = Arc::new(GaussianTrajectoryTask::new(t.horizon, t.dim, t.variance, t.context_scale, t.amplitude)?);
                (TaskInstance::Gaussian(task.clone()), task)
            }
            TaskKind::PointMass => {
                let path = t.world.as_ref().expect("validated");
                let world = PointMassWorld::load(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let prior = Arc::new(WaypointPrior::new(&world, t.horizon, t.step_len, t.margin)?);
                (TaskInstance::PointMass { world, prior: prior.clone() }, prior)
            }
        };
        let context_dim = mean_model.context_dim();
        let denoiser: Arc<dyn crate::denoiser::Denoiser> = match config.denoiser.kind {
            DenoiserKind::Analytic => Arc::new(AnalyticGaussianDenoiser::new(mean_model, t.variance, &sched)?),
            DenoiserKind::TinyMlp => Arc::new(TinyMlpDenoiser::new(TinyMlpConfig {
                horizon: t.horizon,
                dim: t.dim,
                context_dim,
                steps: sched.steps(),
                embed_dim: config.denoiser.embed_dim,
                bottleneck: config.denoiser.bottleneck,
                width: config.denoiser.width,
                seed: config.seeds.weights,
            })?),
        };
        let mut model = Model::new(denoiser);
        if config.denoiser.guidance_weight != 0.0 {
            model = model.with_guidance(Guidance {
                weight: config.denoiser.guidance_weight,
                null_context: vec![0.0; context_dim],
            })?;
        }
        Ok(Self { config, sched, kind, model, task })
    }

    /// Contexts for episodes `offset..offset + n` of the stream `base`.
    pub fn contexts(&self, base: u64, offset: u64, n: usize) -> Result<Vec<Vec<f64>>> {
        match &self.task {
            TaskInstance::Gaussian(task) => Ok(task.contexts(base, offset, n)),
            TaskInstance::PointMass { world, .. } => (0..n as u64)
                .map(|i| {
                    let (s, g) =
                        world.sample_task(derive(base, Role::Start, offset + i), self.config.task.min_separation)?;
                    Ok(vec![s[0], s[1], g[0], g[1]])
                })
                .collect(),
        }
    }

    pub fn calibration_inputs(&self) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
        let n = self.config.calibration.episodes;
        let seeds = &self.config.seeds;
        Ok((self.contexts(seeds.calibration_context, 0, n)?, tape_seeds(seeds.calibration_tape, 0, n)))
    }

    pub fn evaluation_inputs(&self, offset: u64, n: usize) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
        let seeds = &self.config.seeds;
        Ok((self.contexts(seeds.evaluation_context, offset, n)?, tape_seeds(seeds.evaluation_tape, offset, n)))
    }
}

/// Budget from the policy section: fixed, or a quantile of the sorted
/// calibration deviations.
pub fn resolve_eta(policy: &PolicySection, sorted_deviations: &[f64]) -> Result<f64> {
    match (policy.eta_traj, policy.eta_quantile) {
        (Some(eta), _) => Ok(eta),
        (None, Some(q)) if !sorted_deviations.is_empty() => Ok(quantile_sorted(sorted_deviations, q)),
        (None, Some(_)) => Err(Error::Config("eta_quantile needs calibration deviations in the artifact".into())),
        (None, None) => Err(Error::Config("policy needs eta_traj or eta_quantile".into())),
    }
}

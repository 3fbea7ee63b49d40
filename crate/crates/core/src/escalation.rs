//! Certificate-driven runtime escalation.
//!
//! The certificate ratio `ρ` of each planning call drives a hysteretic mode
//! machine. Higher modes damp the executed command, resample the plan from
//! several candidates, or replace it with a full-compute plan.

use serde::{Deserialize, Serialize};

use crate::policy::Certificate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Nominal,
    Warn,
    Resample,
    FullOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EscalationConfig {
    pub rho_warn: f64,
    pub rho_resample: f64,
    pub rho_full: f64,
    pub rho_clear: f64,
    pub damping_warn: f64,
    pub damping_resample: f64,
    /// Candidates drawn in resample mode.
    pub candidates: usize,
    /// Consecutive clear calls needed to return to nominal.
    pub clear_streak: u32,
}

impl Default for EscalationConfig {
    fn default() -> Self {
        Self {
            rho_warn: 0.60,
            rho_resample: 0.75,
            rho_full: 0.90,
            rho_clear: 0.50,
            damping_warn: 0.70,
            damping_resample: 0.50,
            candidates: 4,
            clear_streak: 2,
        }
    }
}

impl EscalationConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = 0.0 <= self.rho_clear
            && self.rho_clear < self.rho_warn
            && self.rho_warn < self.rho_resample
            && self.rho_resample < self.rho_full
            && self.rho_full <= 1.0;
        if !ordered {
            return Err(Error::Config("escalation thresholds must satisfy 0 <= clear < warn < resample < full <= 1".into()));
        }
        let damping_ok = |l: f64| l > 0.0 && l <= 1.0;
        if !damping_ok(self.damping_warn) || !damping_ok(self.damping_resample) {
            return Err(Error::Config("damping factors must lie in (0, 1]".into()));
        }
        if self.candidates == 0 || self.clear_streak == 0 {
            return Err(Error::Config("candidates and clear_streak must be positive".into()));
        }
        Ok(())
    }

    /// Highest mode whose entry threshold `ρ` strictly exceeds.
    pub fn band(&self, rho: f64) -> Mode {
        if rho > self.rho_full {
            Mode::FullOverride
        } else if rho > self.rho_resample {
            Mode::Resample
        } else if rho > self.rho_warn {
            Mode::Warn
        } else {
            Mode::Nominal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EscalationState {
    pub mode: Mode,
    /// Consecutive calls with `ρ ≤ ρ_clear`.
    pub clear_count: u32,
}

/// Advances the mode machine by one call and returns the mode for that call.
pub fn update_state(state: EscalationState, rho: f64, cfg: &EscalationConfig) -> (EscalationState, Mode) {
    let clear_count = if rho <= cfg.rho_clear { state.clear_count + 1 } else { 0 };
    let mut mode = state.mode.max(cfg.band(rho));
    let mut next = EscalationState { mode, clear_count };
    if clear_count >= cfg.clear_streak {
        mode = Mode::Nominal;
        next = EscalationState { mode, clear_count: 0 };
    }
    (next, mode)
}

/// Command scale `λ` for a call in `mode` with ratio `ρ`.
pub fn damping_factor(mode: Mode, rho: f64, cfg: &EscalationConfig) -> f64 {
    match mode.max(cfg.band(rho)) {
        Mode::Nominal | Mode::FullOverride => 1.0,
        Mode::Warn => cfg.damping_warn,
        Mode::Resample => cfg.damping_resample,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T> {
    pub plan: T,
    pub certificate: Certificate,
    pub feasible: bool,
}

/// Index of the feasible candidate with the smallest `D̂`, lowest index on
/// ties; `None` when no candidate is feasible.
pub fn multi_sample_select<T>(candidates: &[Candidate<T>]) -> Result<Option<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("multi-sample candidates"));
    }
    Ok(candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible)
        .min_by(|(i, a), (j, b)| a.certificate.d_hat.total_cmp(&b.certificate.d_hat).then(i.cmp(j)))
        .map(|(i, _)| i))
}

/// Per-candidate `(α / M, α / (M |eligible|))`.
pub fn allocate_multi_sample_risk(alpha: f64, candidates: usize, eligible_count: usize) -> Result<(f64, f64)> {
    if candidates == 0 || eligible_count == 0 {
        return Err(Error::InvalidArgument("candidate and eligible counts must be positive".into()));
    }
    let per_candidate = alpha / candidates as f64;
    Ok((per_candidate, per_candidate / eligible_count as f64))
}

/// Scales a command by `λ` and saturates each component to `±limits`.
pub fn damp_and_saturate(command: &[f64], lambda: f64, limits: &[f64]) -> Result<Vec<f64>> {
    if command.len() != limits.len() {
        return Err(Error::DimensionMismatch { left: command.len(), right: limits.len() });
    }
    Ok(command.iter().zip(limits).map(|(u, l)| (lambda * u).clamp(-l.abs(), l.abs())).collect())
}

/// Command actually sent for one tick.
///
/// `full_plan_command` is the first command of the full-compute plan, used in
/// override mode. A missed deadline returns the zero hold command.
pub fn escalated_control(
    mode: Mode,
    rho: f64,
    nominal: &[f64],
    full_plan_command: Option<&[f64]>,
    limits: &[f64],
    cfg: &EscalationConfig,
    deadline_missed: bool,
) -> Result<Vec<f64>> {
    if deadline_missed {
        return Ok(vec![0.0; nominal.len()]);
    }
    if nominal.iter().any(|u| !u.is_finite()) {
        return Err(Error::InvalidArgument("non-finite command".into()));
    }
    match (mode.max(cfg.band(rho)), full_plan_command) {
        (Mode::FullOverride, Some(full)) => damp_and_saturate(full, 1.0, limits),
        (Mode::FullOverride, None) => Err(Error::InvalidArgument("override mode needs the full-compute command".into())),
        (m, _) => damp_and_saturate(nominal, damping_factor(m, rho, cfg), limits),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationAction {
    Execute,
    Damp,
    Resample,
    FullOverride,
    Hold,
}

/// One JSON line of the escalation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationEvent {
    pub call: usize,
    pub rho: f64,
    pub mode: Mode,
    pub action: EscalationAction,
    #[serde(rename = "M")]
    pub m: usize,
    pub selected: Option<usize>,
}

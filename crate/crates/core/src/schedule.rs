//! Noise schedules, sampler kinds and sensitivity coefficients.
//!
//! Steps are 1-based: `t ∈ 1..=T`, stored at slot `t - 1`. `alpha_bar(0)` is 1.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const COSINE_BETA_MIN: f64 = 1e-8;
const COSINE_BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step betas; `alpha_bar` is the running product.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta[{}]={b} outside (0,1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if alpha_bar.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidSchedule("alpha_bar underflows to 0".into()));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Keeps only the listed training steps (strictly increasing, 1-based).
    ///
    /// The result has `steps.len()` steps whose `ᾱ` equal the selected training
    /// values; betas are re-derived as `1 - ᾱ_k / ᾱ_{k-1}` over the subset.
    pub fn subset(&self, steps: &[usize]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidSchedule("empty step subset".into()));
        }
        let mut prev_step = 0;
        let mut prev_bar = 1.0;
        let mut beta = Vec::with_capacity(steps.len());
        for &s in steps {
            if s <= prev_step || s > self.steps() {
                return Err(Error::InvalidSchedule(format!(
                    "subset must be strictly increasing within 1..={}; got {s} after {prev_step}",
                    self.steps()
                )));
            }
            let bar = self.alpha_bar(s);
            beta.push(1.0 - bar / prev_bar);
            prev_step = s;
            prev_bar = bar;
        }
        Self::from_betas(beta)
    }
}

/// Linear betas from `beta_min` at `t = 1` to `beta_max` at `t = T`.
pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Cosine schedule with offset `s`; betas are clipped to `[1e-8, 0.999]` and
/// `ᾱ` is recomputed from the clipped values.
pub fn make_cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be at least 1".into()));
    }
    if !(offset > 0.0) {
        return Err(Error::InvalidSchedule(format!("cosine offset must be positive, got {offset}")));
    }
    let f = |u: f64| {
        let x = ((u / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let beta = (1..=steps)
        .map(|t| {
            let prev = f((t - 1) as f64) / f0;
            let cur = f(t as f64) / f0;
            (1.0 - cur / prev).clamp(COSINE_BETA_MIN, COSINE_BETA_MAX)
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`
    BetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerKind {
    pub variant: Variant,
    /// DDIM stochasticity; ignored for DDPM.
    pub eta: f64,
    pub ddpm_sigma_rule: SigmaRule,
}

impl SamplerKind {
    pub fn ddpm(rule: SigmaRule) -> Self {
        Self { variant: Variant::Ddpm, eta: 0.0, ddpm_sigma_rule: rule }
    }

    pub fn ddim(eta: f64) -> Self {
        Self { variant: Variant::Ddim, eta, ddpm_sigma_rule: SigmaRule::Beta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("DDIM eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// True when the update injects fresh noise.
    pub fn is_stochastic(&self) -> bool {
        match self.variant {
            Variant::Ddpm => true,
            Variant::Ddim => self.eta > 0.0,
        }
    }
}

/// Signed DDIM coefficients `(a_t, b_t)`.
pub fn ddim_coefficients(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let a = (ab_prev / ab).sqrt();
    let b = (1.0 - ab_prev).sqrt() - a * (1.0 - ab).sqrt();
    Ok((a, b))
}

/// `(K_t, L'_t) = (1/√α_t, β_t / (√α_t √(1-ᾱ_t)))`.
pub fn ddpm_step_constants(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::DegenerateStep { t });
    }
    let sqrt_alpha = sched.alpha(t).sqrt();
    Ok((1.0 / sqrt_alpha, sched.beta(t) / (sqrt_alpha * (1.0 - ab).sqrt())))
}

/// `(K_t, L'_t) = (|a_t|, |b_t|)`; the stochastic term cancels in paired chains.
pub fn ddim_step_constants(sched: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let (a, b) = ddim_coefficients(sched, t)?;
    Ok((a.abs(), b.abs()))
}

pub fn step_constants(sched: &NoiseSchedule, kind: &SamplerKind, t: usize) -> Result<(f64, f64)> {
    match kind.variant {
        Variant::Ddpm => ddpm_step_constants(sched, t),
        Variant::Ddim => ddim_step_constants(sched, t),
    }
}

/// Per-step local and pathwise sensitivities, slot `t - 1` for step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub k: Vec<f64>,
    pub l_prime: Vec<f64>,
    pub l: Vec<f64>,
    /// `Σ_{j<t} ln K_j` (exclusive prefix sum).
    pub log_k_cumsum: Vec<f64>,
}

impl SensitivityProfile {
    /// Pathwise coefficient `L_t`.
    pub fn pathwise(&self, t: usize) -> f64 {
        self.l[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.l.len()
    }
}

/// `L_t = L'_t ∏_{j<t} K_j`, accumulated in log space.
pub fn pathwise_sensitivities(sched: &NoiseSchedule, kind: &SamplerKind) -> Result<SensitivityProfile> {
    let steps = sched.steps();
    let mut k = Vec::with_capacity(steps);
    let mut l_prime = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (kt, lt) = step_constants(sched, kind, t)?;
        if kt == 0.0 {
            return Err(Error::SingularSchedule { t });
        }
        k.push(kt);
        l_prime.push(lt);
    }
    let mut log_k_cumsum = Vec::with_capacity(steps);
    let mut acc = 0.0;
    for kt in &k {
        log_k_cumsum.push(acc);
        acc += kt.ln();
    }
    let l = l_prime
        .iter()
        .zip(&log_k_cumsum)
        .map(|(lp, lk)| if *lp == 0.0 { 0.0 } else { (lp.ln() + lk).exp() })
        .collect();
    Ok(SensitivityProfile { k, l_prime, l, log_k_cumsum })
}

//! Shared setup for the integration tests and the acceptance suite.
#![allow(dead_code)]

use muninn::calibration::{CalibrationArtifact, CalibrationData};
use muninn::cli::{artifact_from_data, calibration_data, Experiment, ExperimentConfig};
use muninn::escalation::{update_state, Candidate, EscalationConfig, EscalationState, Mode};
use muninn::metrics::quantile_sorted;

/// Gaussian-task config. `variant` is `"ddim"` or `"ddpm"`; `denoiser` is
/// `"analytic"` or `"tiny_mlp"`.
pub fn gaussian_toml(steps: usize, variant: &str, denoiser: &str, horizon: usize, dim: usize) -> String {
    format!(
        r#"
[schedule]
kind = "linear"
steps = {steps}
beta_max = 0.2

[sampler]
variant = "{variant}"

[task]
kind = "gaussian"
horizon = {horizon}
dim = {dim}

[denoiser]
kind = "{denoiser}"

[calibration]
episodes = 256

[policy]
eta_quantile = 0.6
"#
    )
}

pub fn experiment(toml: &str) -> Experiment {
    Experiment::build(ExperimentConfig::parse(toml).expect("config parses")).expect("experiment builds")
}

pub fn calibrated(exp: &Experiment, alpha: f64) -> (CalibrationData, CalibrationArtifact) {
    let data = calibration_data(exp).expect("calibration runs");
    let artifact = artifact_from_data(exp, &data, alpha).expect("artifact builds");
    (data, artifact)
}

/// Quantile `q` of the calibration-time paired deviations.
pub fn deviation_quantile(data: &CalibrationData, q: f64) -> f64 {
    let mut d = data.deviations.clone();
    d.sort_by(f64::total_cmp);
    quantile_sorted(&d, q)
}

/// Least-squares nondecreasing fit by enumerating every split of the sequence
/// into contiguous blocks and keeping the best one whose block means ascend.
pub fn brute_force_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for i in 0..n {
            let cut = i == n - 1 || mask & (1 << i) != 0;
            if cut {
                let mean = y[start..=i].iter().sum::<f64>() / (i + 1 - start) as f64;
                if mean < prev - 1e-12 {
                    ok = false;
                    break;
                }
                prev = mean;
                fit.extend(std::iter::repeat_n(mean, i + 1 - start));
                start = i + 1;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    best.expect("the all-pooled split is always monotone").1
}

/// Mode sequence of a whole run, written as a plain loop over the rules:
/// a call never sits below its own band, modes only rise between calls, and
/// `clear_streak` consecutive clear calls drop straight to nominal.
pub fn reference_modes(rhos: &[f64], cfg: &EscalationConfig) -> Vec<Mode> {
    let mut out = Vec::new();
    let mut held = Mode::Nominal;
    let mut streak = 0;
    for &rho in rhos {
        streak = if rho <= cfg.rho_clear { streak + 1 } else { 0 };
        let band = [
            (cfg.rho_full, Mode::FullOverride),
            (cfg.rho_resample, Mode::Resample),
            (cfg.rho_warn, Mode::Warn),
        ]
        .into_iter()
        .find(|(th, _)| rho > *th)
        .map_or(Mode::Nominal, |(_, m)| m);
        held = held.max(band);
        if streak >= cfg.clear_streak {
            held = Mode::Nominal;
            streak = 0;
        }
        out.push(held);
    }
    out
}

/// Modes returned by the library state machine over a run.
pub fn machine_modes(rhos: &[f64], cfg: &EscalationConfig) -> Vec<Mode> {
    let mut state = EscalationState::default();
    rhos.iter()
        .map(|&rho| {
            let (next, mode) = update_state(state, rho, cfg);
            state = next;
            mode
        })
        .collect()
}

pub fn selection_brute_force(c: &[Candidate<()>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..c.len() {
        if !c[i].feasible {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => c[i].certificate.d_hat < c[b].certificate.d_hat,
        };
        if better {
            best = Some(i);
        }
    }
    best
}

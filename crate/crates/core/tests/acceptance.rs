//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use muninn::calibration::{
    conformal_quantile, conformal_rank, fit_isotonic, generate_calibration, CalibrationArtifact, CalibrationData,
};
use muninn::cli::{cmd_calibrate, cmd_evaluate, cmd_report, EscalationMode, EvaluateOptions, Experiment, ExperimentConfig};
use muninn::escalation::{multi_sample_select, update_state, Candidate, EscalationConfig, EscalationState, Mode};
use muninn::metrics::{mace, spearman, speedup_model, wilson_interval, MetricsBundle, ALPHA_TARGETS, Z95};
use muninn::policy::{muninn_call, CallOptions, Certificate};
use muninn::sampler::{reverse_step, run_full_chain, NoisePrediction, NoiseTape, Trajectory};
use muninn::schedule::{make_cosine_schedule, make_linear_schedule, step_constants, SamplerKind, SigmaRule};
use muninn::testbed::{paired_eval, PairedDecision, PairedOptions, SummarySpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

mod common;

type Outcome = Result<(bool, String), String>;

fn err(e: muninn::Error) -> String {
    e.to_string()
}

fn configs_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn load(name: &str) -> Result<Experiment, String> {
    let cfg = ExperimentConfig::load(&configs_dir().join(name)).map_err(err)?;
    Experiment::build(cfg).map_err(err)
}

struct Calibrated {
    exp: Experiment,
    data: CalibrationData,
    artifact: CalibrationArtifact,
}

impl Calibrated {
    fn new(exp: Experiment, alpha: f64) -> Self {
        let (data, artifact) = common::calibrated(&exp, alpha);
        Self { exp, data, artifact }
    }

    fn eta_quantile(&self, q: f64) -> f64 {
        common::deviation_quantile(&self.data, q)
    }

    fn summary(&self, eta: f64, alpha: f64) -> SummarySpec {
        SummarySpec {
            label: "acceptance".into(),
            config_hash: self.exp.config.hash(),
            artifact_hash: String::new(),
            steps: self.exp.sched.steps(),
            alpha,
            eta_traj: eta,
            probe_cost_ratio: self.exp.model.probe_cost_ratio(),
            bootstrap_replicates: 500,
            bootstrap_seed: 0,
        }
    }

    /// Paired evaluation on held-out episodes `0..n`.
    fn paired(&self, artifact: &CalibrationArtifact, eta: f64, n: usize, instrumented: bool) -> Result<(Vec<PairedDecision>, MetricsBundle), String> {
        let (contexts, seeds) = self.exp.evaluation_inputs(0, n).map_err(err)?;
        let opts = PairedOptions { paired: true, call: CallOptions { instrumented, ..Default::default() } };
        let out = paired_eval(
            &self.exp.model,
            &self.exp.sched,
            &self.exp.kind,
            artifact,
            eta,
            &contexts,
            &seeds,
            opts,
            &self.summary(eta, artifact.primary.alpha),
        )
        .map_err(err)?;
        Ok((out.decisions, out.bundle))
    }
}

// 1. Sensitivity constants against finite-difference Jacobians.
fn sensitivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let rand_matrix = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((3, 2), |_| rng.sample::<f64, _>(StandardNormal));
    for _ in 0..200 {
        let steps = rng.gen_range(2..=200);
        let sched = if rng.gen_bool(0.5) {
            let lo = rng.gen_range(1e-4..1e-2);
            make_linear_schedule(steps, lo, rng.gen_range(lo..0.3)).map_err(err)?
        } else {
            make_cosine_schedule(steps, rng.gen_range(1e-3..0.02)).map_err(err)?
        };
        let kind = match rng.gen_range(0..4) {
            0 => SamplerKind::ddpm(SigmaRule::Beta),
            1 => SamplerKind::ddpm(SigmaRule::BetaTilde),
            2 => SamplerKind::ddim(0.0),
            _ => SamplerKind::ddim(rng.gen_range(0.0..1.0)),
        };
        let t = rng.gen_range(1..=steps);
        let (tau, eps, xi, dir) = (rand_matrix(&mut rng), rand_matrix(&mut rng), rand_matrix(&mut rng), rand_matrix(&mut rng));
        let phi = |tau: &Array2<f64>, eps: &Array2<f64>| {
            reverse_step(
                &Trajectory::new(tau.clone()),
                &NoisePrediction::new(eps.clone()),
                t,
                &sched,
                &kind,
                &Trajectory::new(xi.clone()),
            )
            .map(Trajectory::into_values)
        };
        let norm = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h = 1e-6;
        let step = &dir * h;
        let jt = (phi(&(&tau + &step), &eps).map_err(err)? - phi(&(&tau - &step), &eps).map_err(err)?) / (2.0 * h);
        let je = (phi(&tau, &(&eps + &step)).map_err(err)? - phi(&tau, &(&eps - &step)).map_err(err)?) / (2.0 * h);
        let (k, l) = step_constants(&sched, &kind, t).map_err(err)?;
        worst = worst.max((norm(&jt) / norm(&dir) - k).abs() / k).max((norm(&je) / norm(&dir) - l).abs() / l);
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.2e} over 200 draws")))
}

fn gaussian(steps: usize, variant: &str, denoiser: &str) -> Result<Calibrated, String> {
    let exp = Experiment::build(ExperimentConfig::parse(&common::gaussian_toml(steps, variant, denoiser, 8, 2)).map_err(err)?)
        .map_err(err)?;
    Ok(Calibrated::new(exp, 0.1))
}

/// Analytic and TinyMlp setups at T = 10, 20, 50; T = 20 uses DDPM.
fn bound_fixtures() -> Result<Vec<(String, Calibrated)>, String> {
    let mut out = Vec::new();
    for denoiser in ["analytic", "tiny_mlp"] {
        for (steps, variant) in [(10, "ddim"), (20, "ddpm"), (50, "ddim")] {
            out.push((format!("{denoiser}/T={steps}/{variant}"), gaussian(steps, variant, denoiser)?));
        }
    }
    Ok(out)
}

// 2. Pathwise bound on every instrumented call.
fn pathwise(fixtures: &[(String, Calibrated)]) -> Outcome {
    let per = 2000usize.div_ceil(fixtures.len());
    let mut total = 0;
    let mut parts = Vec::new();
    for (name, fx) in fixtures {
        let (decisions, _) = fx.paired(&fx.artifact, fx.eta_quantile(0.6), per, true)?;
        let broken = decisions
            .iter()
            .filter(|d| d.stats.d.expect("paired") > d.pathwise_bound.expect("instrumented") + 1e-9)
            .count();
        total += decisions.len();
        parts.push(format!("{name} {broken}/{per}"));
    }
    let ok = parts.iter().all(|p| p.contains(" 0/"));
    Ok((ok, format!("{total} calls; violations {}", parts.join(", "))))
}

// 3. Budget safety under randomized budgets.
fn budget(fixtures: &[(String, Calibrated)]) -> Outcome {
    let n = 10_000;
    let worst = (0..n)
        .into_par_iter()
        .map(|i| {
            let (_, fx) = &fixtures[i % fixtures.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let scale = fx.eta_quantile(1.0).max(1e-6);
            let eta = scale * 10f64.powf(rng.gen_range(-6.0..1.0));
            let (h, d) = fx.exp.model.shape();
            let ctx = fx.exp.evaluation_inputs(rng.gen_range(0..1_000_000), 1).map_err(err)?.0.remove(0);
            let tape = NoiseTape::generate(rng.gen(), h, d, fx.exp.sched.steps(), fx.exp.kind.is_stochastic());
            let rec = muninn_call(&fx.exp.model, &fx.exp.sched, &fx.exp.kind, &fx.artifact, eta, &tape, &ctx, CallOptions::default())
                .map_err(err)?;
            let sum = rec.ledger.spent.iter().fold(0.0, |s, (_, c)| s + c);
            Ok(((sum - eta) / eta).max((rec.certificate.d_hat - eta) / eta))
        })
        .collect::<Result<Vec<f64>, String>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((worst <= 1e-12, format!("{n} calls; max (spent - eta)/eta = {worst:.3e}")))
}

// 4. Per-step coverage on fresh ghost-chain episodes.
fn coverage() -> Outcome {
    let fx = Calibrated::new(load("gaussian.toml")?, 0.2);
    let c = &fx.exp.config.calibration;
    let (contexts, seeds) = fx.exp.evaluation_inputs(0, 256).map_err(err)?;
    let fresh = generate_calibration(
        &fx.exp.model,
        &fx.exp.sched,
        &fx.exp.kind,
        &contexts,
        &seeds,
        &fx.artifact.eligible,
        c.anchor_stride,
        c.omega,
    )
    .map_err(err)?;
    let target = 1.0 - fx.artifact.primary.alpha_step;
    let mut worst = (f64::INFINITY, 0, 0usize);
    let mut ok = true;
    for env in &fx.artifact.primary.envelopes {
        let pairs = fresh.at(env.step);
        let k = pairs.iter().filter(|p| p.eps <= env.evaluate(p.s)).count();
        let ci = wilson_interval(k, pairs.len(), Z95).map_err(err)?;
        ok &= ci.hi >= target;
        let p = k as f64 / pairs.len() as f64;
        if p < worst.0 {
            worst = (p, env.step, pairs.len());
        }
    }
    ok &= fx.artifact.primary.envelopes.len() == fx.artifact.eligible.len();
    Ok((
        ok,
        format!(
            "{} eligible steps; lowest coverage {:.4} at t={} (n={}), target 1-alpha_step = {target:.4}",
            fx.artifact.eligible.len(),
            worst.0,
            worst.1,
            worst.2
        ),
    ))
}

// 5 and 6. Global risk, certificate reliability and rank agreement.
fn risk_and_reliability() -> Result<(Outcome, Outcome), String> {
    let fx = Calibrated::new(load("gaussian.toml")?, 0.05);
    let eta = fx.eta_quantile(0.6);
    let (decisions, bundle) = fx.paired(&fx.artifact, eta, 500, false)?;
    let p = bundle.p_viol.expect("paired");
    let risk = (p <= 0.08, format!("eta={eta:.4}, p_viol={p:.4} over 500 episodes"));
    let reliability = bundle.reliability.expect("paired");
    let d_hat: Vec<f64> = decisions.iter().map(|d| d.stats.d_hat).collect();
    let d: Vec<f64> = decisions.iter().map(|d| d.stats.d.expect("paired")).collect();
    let rho = spearman(&d_hat, &d).map_err(err)?;
    let rel = (reliability >= 0.92 && rho >= 0.0, format!("reliability={reliability:.4}, spearman={rho:.4}"));
    Ok((Ok(risk), Ok(rel)))
}

// 7. Budget sweep on the TinyMlp T = 100 configuration.
fn speed_fidelity() -> Outcome {
    let fx = Calibrated::new(load("tiny_mlp.toml")?, 0.05);
    let r = fx.exp.model.probe_cost_ratio();
    let mut rows = Vec::new();
    for eta in [0.05, 0.15, 0.30] {
        let (_, b) = fx.paired(&fx.artifact, eta, 500, false)?;
        rows.push((eta, b.reuse_frac, b.evals_per_t, speedup_model(b.steps, b.mean_evals, r), b.p_viol.expect("paired")));
    }
    let monotone = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let high = rows.last().expect("three points");
    let risk = rows.iter().all(|r| r.4 <= 0.08);
    let ok = monotone && high.2 <= 0.5 && high.3 >= 2.0 && risk;
    let detail = rows
        .iter()
        .map(|(eta, reuse, evals, speed, p)| format!("eta={eta}: reuse={reuse:.3} evals/T={evals:.3} speedup={speed:.2} p_viol={p:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, format!("r={r:.4}; {detail}")))
}

// 8. Realized violation rate against the target risk level.
fn calibration_error() -> Outcome {
    let exp = load("gaussian.toml")?;
    let data = muninn::cli::calibration_data(&exp).map_err(err)?;
    let eta = common::deviation_quantile(&data, 0.6);
    let mut realized = Vec::new();
    for alpha in ALPHA_TARGETS {
        let artifact = muninn::cli::artifact_from_data(&exp, &data, alpha).map_err(err)?;
        let fx = Calibrated { exp: exp.clone(), data: data.clone(), artifact };
        let (_, b) = fx.paired(&fx.artifact, eta, 500, false)?;
        realized.push((alpha, b.p_viol.expect("paired")));
    }
    let m = mace(&realized, &ALPHA_TARGETS).map_err(err)?;
    let detail = realized.iter().map(|(a, p)| format!("{a}->{p:.3}")).collect::<Vec<_>>().join(", ");
    Ok((m <= 0.05, format!("MACE={m:.4} ({detail})")))
}

// 9. PAVA against exhaustive level sets.
fn pava() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=12);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pairs: Vec<(f64, f64)> = y.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
        let fit = fit_isotonic(&pairs).map_err(err)?;
        let brute = common::brute_force_isotonic(&y);
        for ((_, got), want) in fit.knots().zip(&brute) {
            worst = worst.max((got - want).abs());
        }
    }
    Ok((worst <= 1e-9, format!("500 instances; max abs gap {worst:.2e}")))
}

// 10. Conformal quantile fixtures.
fn conformal_fixtures() -> Outcome {
    let r: Vec<f64> = (1..=9).map(f64::from).collect();
    let q = conformal_quantile(&r, 0.1).map_err(err)?;
    let k = conformal_rank(2048, 0.000625).map_err(err)?;
    Ok((q == 9.0 && k == 2048, format!("n=9 -> {q}, n=2048 -> rank {k}")))
}

// 11. Zero budget reproduces the full chain bit for bit.
fn zero_budget(fixtures: &[(String, Calibrated)]) -> Outcome {
    let mut mismatched = 0;
    let mut runs = 0;
    for (_, fx) in fixtures {
        let (contexts, seeds) = fx.exp.evaluation_inputs(7_000, 100).map_err(err)?;
        let (h, d) = fx.exp.model.shape();
        for (ctx, seed) in contexts.iter().zip(&seeds) {
            let tape = NoiseTape::generate(*seed, h, d, fx.exp.sched.steps(), fx.exp.kind.is_stochastic());
            let full = run_full_chain(&fx.exp.model, &fx.exp.sched, &fx.exp.kind, &tape, ctx).map_err(err)?;
            let cached = muninn_call(&fx.exp.model, &fx.exp.sched, &fx.exp.kind, &fx.artifact, 0.0, &tape, ctx, CallOptions::default())
                .map_err(err)?;
            mismatched += usize::from(cached.output != *full.output());
            runs += 1;
        }
    }
    Ok((mismatched == 0, format!("{mismatched} of {runs} runs differ")))
}

const LEVELS: [f64; 5] = [0.3, 0.55, 0.65, 0.8, 0.95];

/// Next `(mode, clear streak)` for each state and each level of `LEVELS`,
/// filled in by hand for the default thresholds.
fn truth_table() -> BTreeMap<(Mode, u32), [(Mode, u32); 5]> {
    use Mode::*;
    let rise = |m: Mode| [(m, 1), (m, 0), (m.max(Warn), 0), (m.max(Resample), 0), (FullOverride, 0)];
    let cleared = |m: Mode| [(Nominal, 0), (m, 0), (m.max(Warn), 0), (m.max(Resample), 0), (FullOverride, 0)];
    BTreeMap::from([
        ((Nominal, 0), [(Nominal, 1), (Nominal, 0), (Warn, 0), (Resample, 0), (FullOverride, 0)]),
        ((Nominal, 1), [(Nominal, 0), (Nominal, 0), (Warn, 0), (Resample, 0), (FullOverride, 0)]),
        ((Warn, 0), rise(Warn)),
        ((Warn, 1), cleared(Warn)),
        ((Resample, 0), [(Resample, 1), (Resample, 0), (Resample, 0), (Resample, 0), (FullOverride, 0)]),
        ((Resample, 1), cleared(Resample)),
        ((FullOverride, 0), [(FullOverride, 1), (FullOverride, 0), (FullOverride, 0), (FullOverride, 0), (FullOverride, 0)]),
        ((FullOverride, 1), cleared(FullOverride)),
    ])
}

// 12. Escalation state machine and multi-sample selection.
fn escalation() -> Outcome {
    let cfg = EscalationConfig::default();
    let table = truth_table();
    let mut sequences = 0;
    let mut mismatches = 0;
    for len in 1..=6u32 {
        for code in 0..LEVELS.len().pow(len) {
            let (mut c, mut state, mut want) = (code, EscalationState::default(), (Mode::Nominal, 0));
            let mut rhos = Vec::new();
            let mut bad = false;
            for _ in 0..len {
                let level = c % LEVELS.len();
                c /= LEVELS.len();
                rhos.push(LEVELS[level]);
                want = table[&want][level];
                let (next, mode) = update_state(state, LEVELS[level], &cfg);
                state = next;
                bad |= (mode, next.mode, next.clear_count) != (want.0, want.0, want.1);
            }
            bad |= common::machine_modes(&rhos, &cfg) != common::reference_modes(&rhos, &cfg);
            mismatches += usize::from(bad);
            sequences += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut selection_errors = 0;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=8);
        let cands: Vec<Candidate<()>> = (0..m)
            .map(|_| {
                let d_hat = if rng.gen_bool(0.3) { 0.25 } else { rng.gen_range(0.0..1.0) };
                Candidate { plan: (), certificate: Certificate { d_hat, rho: d_hat }, feasible: rng.gen_bool(0.7) }
            })
            .collect();
        selection_errors += usize::from(multi_sample_select(&cands).map_err(err)? != common::selection_brute_force(&cands));
    }
    Ok((
        mismatches == 0 && selection_errors == 0,
        format!("{sequences} sequences, {mismatches} mismatches; 1000 selection sets, {selection_errors} errors"),
    ))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pipeline(config: &Path, root: &Path) -> Result<(), String> {
    let run = root.join("run");
    let artifact = cmd_calibrate(config, Some(&run)).map_err(err)?;
    let opts = EvaluateOptions {
        episodes: None,
        seed_offset: 0,
        escalation: EscalationMode::Off,
        paired: true,
        instrumented: false,
        out: Some(run),
    };
    cmd_evaluate(config, &artifact, &opts).map_err(err)?;
    cmd_report(root).map_err(err)?;
    Ok(())
}

// 13. Byte-identical reruns of the whole pipeline. Wall-clock timings are
// the only output allowed to differ.
fn reproducibility() -> Outcome {
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in ["gaussian.toml", "point_mass_prior.toml"] {
        let config = configs_dir().join(name);
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        pipeline(&config, a.path())?;
        pipeline(&config, b.path())?;
        let files = files_under(a.path());
        if files != files_under(b.path()) {
            differing.push(format!("{name}: file sets"));
        }
        for rel in files.iter().filter(|f| f.file_name().is_some_and(|n| n != "timing.json")) {
            compared += 1;
            let same = std::fs::read(a.path().join(rel)).ok() == std::fs::read(b.path().join(rel)).ok();
            if !same {
                differing.push(format!("{name}: {}", rel.display()));
            }
        }
    }
    Ok((differing.is_empty(), format!("{compared} files compared; differing: [{}]", differing.join(", "))))
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, limit: Option<Duration>, elapsed: Duration, outcome: Outcome) {
        let (mut pass, mut detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if let Some(limit) = limit {
            if elapsed > limit {
                pass = false;
                detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
            }
        }
        self.failed += usize::from(!pass);
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} [{id:>2}] {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    }

    fn run(&mut self, id: u32, name: &str, limit: Option<u64>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = guarded(f);
        self.report(id, name, limit.map(Duration::from_secs), start.elapsed(), outcome);
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panic: {msg}"))
    })
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.run(1, "sensitivity constants", Some(10), sensitivity);

    let start = Instant::now();
    let fixtures = guarded(bound_fixtures);
    let setup = start.elapsed();
    match &fixtures {
        Ok(fx) => {
            let t = Instant::now();
            let out = pathwise(fx);
            suite.report(2, "pathwise bound", Some(Duration::from_secs(120)), setup + t.elapsed(), out);
            suite.run(3, "budget safety", Some(120), || budget(fx));
        }
        Err(e) => {
            suite.report(2, "pathwise bound", None, setup, Err(e.clone()));
            suite.report(3, "budget safety", None, setup, Err(e.clone()));
        }
    }
    suite.run(4, "per-step coverage", Some(300), coverage);

    let start = Instant::now();
    match guarded(risk_and_reliability) {
        Ok((risk, rel)) => {
            let elapsed = start.elapsed();
            suite.report(5, "global risk", Some(Duration::from_secs(600)), elapsed, risk);
            suite.report(6, "certificate reliability", None, elapsed, rel);
        }
        Err(e) => {
            suite.report(5, "global risk", None, start.elapsed(), Err(e.clone()));
            suite.report(6, "certificate reliability", None, start.elapsed(), Err(e));
        }
    }
    suite.run(7, "speed-fidelity sweep", None, speed_fidelity);
    suite.run(8, "calibration error", Some(1800), calibration_error);
    suite.run(9, "isotonic oracle", None, pava);
    suite.run(10, "conformal fixtures", None, conformal_fixtures);
    match &fixtures {
        Ok(fx) => suite.run(11, "zero-budget identity", None, || zero_budget(fx)),
        Err(e) => suite.report(11, "zero-budget identity", None, Duration::ZERO, Err(e.clone())),
    }
    suite.run(12, "escalation state machine", None, escalation);
    suite.run(13, "reproducibility", None, reproducibility);

    println!("{} of 13 criteria failed", suite.failed);
    if suite.failed > 0 {
        std::process::exit(1);
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::commands::{EPISODES_FILE, METRICS_FILE};
use crate::metrics::MetricsBundle;
use crate::{Error, Result};

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_metrics(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
            found.push(path);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct EpisodeLine {
    id: usize,
    d_hat: f64,
    d: Option<f64>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn run_name(root: &Path, metrics: &Path) -> String {
    let parent = metrics.parent().unwrap_or(root);
    match parent.strip_prefix(root) {
        Ok(rel) if rel.as_os_str().is_empty() => ".".into(),
        Ok(rel) => rel.display().to_string(),
        Err(_) => parent.display().to_string(),
    }
}

/// Summarizes every bundle under `dir` into `summary.md`, `pareto.csv` and
/// `reliability.csv` written to `dir`. Returns the number of bundles.
pub fn cmd_report(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    find_metrics(dir, &mut files)?;
    let mut runs: Vec<(String, Vec<MetricsBundle>)> = Vec::new();
    for path in &files {
        let text = fs::read_to_string(path)?;
        let bundles: Vec<MetricsBundle> = serde_json::from_str(&text)
            .map_err(|e| Error::Encoding(format!("{}: {e}", path.display())))?;
        runs.push((run_name(dir, path), bundles));
    }
    let total: usize = runs.iter().map(|(_, b)| b.len()).sum();
    if total == 0 {
        return Err(Error::Empty("no runs found"));
    }

    let mut md = String::from("# Run summary\n\n");
    md.push_str("| run | label | η | α | decisions | Full Evals/T | Cached Evals/T | ReuseFrac | E[d] | p̂_viol (95% CI) | mean D̂ | d ≤ D̂ | speedup (model) | success | collision |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    let mut pareto = String::from("run,label,eta_traj,alpha,evals_per_t,reuse_frac,mean_d,p_viol,success_rate,speedup_model\n");
    for (run, bundles) in &runs {
        for b in bundles {
            let viol = match (b.p_viol, b.p_viol_lo, b.p_viol_hi) {
                (Some(p), Some(lo), Some(hi)) => format!("{p:.3} [{lo:.3}, {hi:.3}]"),
                _ => "n/a".into(),
            };
            writeln!(
                md,
                "| {run} | {} | {:.4} | {} | {} | 1.000 | {:.3} | {:.3} | {} | {viol} | {:.4} | {} | {:.2}x | {} | {} |",
                b.label,
                b.eta_traj,
                b.alpha,
                b.decisions,
                b.evals_per_t,
                b.reuse_frac,
                opt(b.mean_d, 4),
                b.mean_d_hat,
                opt(b.reliability, 3),
                b.speedup_model,
                opt(b.success_rate, 3),
                opt(b.collision_rate, 3),
            )
            .expect("string write");
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                pareto,
                "{run},{},{},{},{},{},{},{},{},{}",
                b.label,
                b.eta_traj,
                b.alpha,
                b.evals_per_t,
                b.reuse_frac,
                cell(b.mean_d),
                cell(b.p_viol),
                cell(b.success_rate),
                b.speedup_model
            )
            .expect("string write");
        }
    }
    if let Some(mace) = runs.iter().flat_map(|(_, b)| b.iter()).find_map(|b| b.mace) {
        writeln!(md, "\nMACE over the risk sweep: {mace:.4}").expect("string write");
    }
    md.push_str("\nFull Evals/T is 1 by definition; speedup is the eval-count model with the measured probe-cost ratio.\n");

    let mut reliability = String::from("decision_id,D_hat,d\n");
    for path in &files {
        let episodes = path.with_file_name(EPISODES_FILE);
        if !episodes.is_file() {
            continue;
        }
        let run = run_name(dir, path);
        for (n, line) in fs::read_to_string(&episodes)?.lines().enumerate() {
            let e: EpisodeLine = serde_json::from_str(line)
                .map_err(|err| Error::Encoding(format!("{}:{}: {err}", episodes.display(), n + 1)))?;
            if let Some(d) = e.d {
                writeln!(reliability, "{run}/{},{},{d}", e.id, e.d_hat).expect("string write");
            }
        }
    }

    fs::write(dir.join("summary.md"), md)?;
    fs::write(dir.join("pareto.csv"), pareto)?;
    fs::write(dir.join("reliability.csv"), reliability)?;
    Ok(total)
}

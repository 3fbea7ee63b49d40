//! Experiment configuration and the `calibrate`, `evaluate`, `sweep` and
//! `report` commands.

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    artifact_from_data, calibration_data, cmd_calibrate, cmd_evaluate, cmd_sweep, EscalationMode, EvaluateOptions,
    EvaluateOutcome, SweepOptions, SweepSpec, ARTIFACT_FILE, EPISODES_FILE, METRICS_FILE,
};
pub use config::{
    resolve_eta, CalibrationSection, DenoiserKind, DenoiserSection, EvaluationSection, Experiment, ExperimentConfig,
    OutputSection, PolicySection, SamplerSection, ScheduleKind, ScheduleSection, SeedSection, TaskInstance, TaskKind,
    TaskSection,
};
pub use report::cmd_report;

use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_GATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "muninn", version, about = "Budgeted noise-prediction caching for diffusion trajectory samplers")]
pub struct Cli {
    /// Worker threads for episode loops (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ghost-chain data and write the calibration artifact.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `[output] dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired full-versus-cached evaluation with an existing artifact.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long, value_enum, default_value_t = EscalationMode::Off)]
        escalation: EscalationMode,
        /// Skip the full-chain reruns; deviation fields are reported as absent.
        #[arg(long)]
        paired_off: bool,
        /// Record true reuse errors (doubles the cost of reuse steps).
        #[arg(long)]
        instrumented: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate over a list of budgets or risk levels.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Artifact for budget sweeps; calibrates from the config when absent.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', conflicts_with = "alpha", required_unless_present = "alpha")]
        eta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        paired_off: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize every run under a directory.
    Report { dir: PathBuf },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Incompatible(_)
        | Error::BadMagic
        | Error::UnsupportedVersion { .. }
        | Error::Truncated
        | Error::Checksum { .. } => EXIT_INCOMPATIBLE,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: worker pool already initialized: {e}");
        }
    }
    let result = match cli.command {
        Command::Calibrate { config, out } => cmd_calibrate(&config, out.as_deref()).map(|path| {
            println!("wrote {}", path.display());
            EXIT_OK
        }),
        Command::Evaluate { config, artifact, episodes, seed_offset, escalation, paired_off, instrumented, out } => {
            let opts = EvaluateOptions { episodes, seed_offset, escalation, paired: !paired_off, instrumented, out };
            cmd_evaluate(&config, &artifact, &opts).map(|outcome| {
                for b in &outcome.bundles {
                    println!("{}", serde_json::to_string(b).expect("bundle serializes"));
                }
                if outcome.gate_passed {
                    EXIT_OK
                } else {
                    eprintln!("violation rate above evaluation.max_violation_rate");
                    EXIT_GATE
                }
            })
        }
        Command::Sweep { config, artifact, eta, alpha, episodes, seed_offset, paired_off, out } => {
            let spec = if eta.is_empty() { SweepSpec::Alpha(alpha) } else { SweepSpec::Eta(eta) };
            let opts = SweepOptions { artifact, episodes, seed_offset, paired: !paired_off, out };
            cmd_sweep(&config, &spec, &opts).map(|bundles| {
                println!("{}", crate::metrics::MetricsBundle::CSV_HEADER);
                for b in &bundles {
                    println!("{}", b.csv_row());
                }
                EXIT_OK
            })
        }
        Command::Report { dir } => cmd_report(&dir).map(|n| {
            println!("summarized {n} bundles in {}", dir.display());
            EXIT_OK
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

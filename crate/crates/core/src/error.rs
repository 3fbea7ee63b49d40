use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("degenerate step t={t}: alpha_bar is 1")]
    DegenerateStep { t: usize },
    #[error("singular schedule: K vanishes at t={t}")]
    SingularSchedule { t: usize },
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("denoiser failed at t={step}: {reason}")]
    Denoiser { step: usize, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no envelope for t={t}; reuse forbidden")]
    ReuseForbidden { t: usize },
    #[error("artifact incompatible: {0}")]
    Incompatible(String),
    #[error("not a calibration artifact (bad magic)")]
    BadMagic,
    #[error("unsupported artifact version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("artifact truncated")]
    Truncated,
    #[error("artifact checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("missing target alpha={0}")]
    MissingTarget(f64),
    #[error("config error: {0}")]
    Config(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

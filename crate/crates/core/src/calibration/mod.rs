//! Offline calibration: ghost-chain data, isotonic means, split-conformal
//! envelopes and the serialized artifact.

mod artifact;
mod conformal;
mod dataset;
mod eligible;
mod isotonic;

pub use artifact::{
    build_artifact, build_envelopes, evaluate_envelope, load_artifact, save_artifact, schedule_hash, ArtifactSpec,
    CalibrationArtifact, EnvelopeSet, MultiSampleSet, Provenance, FORMAT_VERSION, MAGIC,
};
pub use conformal::{conformal_quantile, conformal_rank, ConformalEnvelope, GRID_POINTS, GRID_QUANTILES};
pub use dataset::{generate_calibration, label_shift, CalibrationData, CalibrationPair, LabelShift};
pub use eligible::{anchor_set, eligible_timesteps, EligibleSet};
pub use isotonic::{fit_isotonic, IsotonicFit};

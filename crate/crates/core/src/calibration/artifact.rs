use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conformal::ConformalEnvelope;
use super::dataset::CalibrationData;
use super::eligible::EligibleSet;
use crate::schedule::{pathwise_sensitivities, NoiseSchedule, SamplerKind, SensitivityProfile};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MUNN";
pub const FORMAT_VERSION: u32 = 1;

/// Envelopes for one risk level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSet {
    pub alpha: f64,
    pub alpha_step: f64,
    /// Sorted by step.
    pub envelopes: Vec<ConformalEnvelope>,
    /// Eligible steps without enough data for an envelope.
    pub forbidden: Vec<usize>,
}

impl EnvelopeSet {
    pub fn get(&self, t: usize) -> Option<&ConformalEnvelope> {
        self.envelopes.binary_search_by_key(&t, |e| e.step).ok().map(|i| &self.envelopes[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSampleSet {
    pub candidates: usize,
    pub set: EnvelopeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub episodes: usize,
    pub failed_episodes: usize,
    pub tape_seed: u64,
    pub split_seed: u64,
    pub anchor_stride: usize,
    pub config_hash: String,
    /// Ghost-versus-full deviations of the calibration episodes, ascending.
    pub deviations: Vec<f64>,
}

/// Everything the runtime policy needs, fixed at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub horizon: usize,
    pub dim: usize,
    pub schedule: NoiseSchedule,
    pub kind: SamplerKind,
    pub profile: SensitivityProfile,
    pub gamma: f64,
    /// Labels are `‖·‖_F / label_scale`, with `label_scale = √(Hd)`.
    pub label_scale: f64,
    pub omega: f64,
    pub eligible: EligibleSet,
    pub primary: EnvelopeSet,
    pub multi_sample: Option<MultiSampleSet>,
    pub provenance: Provenance,
}

/// Build inputs other than the calibration pairs.
#[derive(Debug, Clone)]
pub struct ArtifactSpec {
    pub horizon: usize,
    pub dim: usize,
    pub schedule: NoiseSchedule,
    pub kind: SamplerKind,
    pub gamma: f64,
    pub omega: f64,
    pub eligible: EligibleSet,
    pub tape_seed: u64,
    pub anchor_stride: usize,
    pub config_hash: String,
}

/// Rank of each episode id under the split permutation.
fn split_ranks(episodes: usize, split_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..episodes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let mut rank = vec![0; episodes];
    for (pos, ep) in order.into_iter().enumerate() {
        rank[ep] = pos;
    }
    rank
}

/// Fits one envelope per eligible step at risk `alpha`, splitting every step's
/// pairs with one shared episode permutation: first half trains the isotonic
/// mean, second half gives the conformal residuals.
pub fn build_envelopes(data: &CalibrationData, eligible: &EligibleSet, alpha: f64, split_seed: u64) -> Result<EnvelopeSet> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0,1]")));
    }
    let alpha_step = if eligible.is_empty() { alpha } else { alpha / eligible.len() as f64 };
    let rank = split_ranks(data.episodes, split_seed);
    let mut envelopes = Vec::new();
    let mut forbidden = Vec::new();
    for &t in eligible.members() {
        let mut pairs = data.at(t).to_vec();
        if pairs.len() < 2 {
            forbidden.push(t);
            continue;
        }
        pairs.sort_by_key(|p| (rank.get(p.episode).copied().unwrap_or(usize::MAX), p.episode));
        let n_train = pairs.len() / 2;
        let as_tuple = |p: &super::CalibrationPair| (p.s, p.eps);
        let train: Vec<(f64, f64)> = pairs[..n_train].iter().map(as_tuple).collect();
        let cal: Vec<(f64, f64)> = pairs[n_train..].iter().map(as_tuple).collect();
        let scores: Vec<f64> = pairs.iter().map(|p| p.s).collect();
        envelopes.push(ConformalEnvelope::fit(t, &train, &cal, &scores, alpha_step.min(0.999_999))?);
    }
    Ok(EnvelopeSet { alpha, alpha_step, envelopes, forbidden })
}

pub fn build_artifact(data: &CalibrationData, spec: ArtifactSpec, alpha: f64, split_seed: u64) -> Result<CalibrationArtifact> {
    let profile = pathwise_sensitivities(&spec.schedule, &spec.kind)?;
    let primary = build_envelopes(data, &spec.eligible, alpha, split_seed)?;
    let mut deviations = data.deviations.clone();
    deviations.sort_by(f64::total_cmp);
    Ok(CalibrationArtifact {
        version: FORMAT_VERSION,
        horizon: spec.horizon,
        dim: spec.dim,
        label_scale: ((spec.horizon * spec.dim) as f64).sqrt(),
        schedule: spec.schedule,
        kind: spec.kind,
        profile,
        gamma: spec.gamma,
        omega: spec.omega,
        eligible: spec.eligible,
        primary,
        multi_sample: None,
        provenance: Provenance {
            episodes: data.episodes,
            failed_episodes: data.failed_episodes,
            tape_seed: spec.tape_seed,
            split_seed,
            anchor_stride: spec.anchor_stride,
            config_hash: spec.config_hash,
            deviations,
        },
    })
}

impl CalibrationArtifact {
    /// Adds envelopes at `α / M` for `M`-candidate selection.
    pub fn with_multi_sample(mut self, data: &CalibrationData, candidates: usize) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::InvalidArgument("multi-sample count must be >= 1".into()));
        }
        let alpha = self.primary.alpha / candidates as f64;
        let set = build_envelopes(data, &self.eligible, alpha, self.provenance.split_seed)?;
        self.multi_sample = Some(MultiSampleSet { candidates, set });
        Ok(self)
    }

    pub fn envelope(&self, t: usize) -> Option<&ConformalEnvelope> {
        self.primary.get(t)
    }

    /// Ensures the artifact was built for this schedule, sampler and shape.
    pub fn check_compatible(&self, sched: &NoiseSchedule, kind: &SamplerKind, shape: (usize, usize)) -> Result<()> {
        if self.schedule != *sched {
            return Err(Error::Incompatible(format!(
                "schedule hash {} differs from runtime {}",
                schedule_hash(&self.schedule),
                schedule_hash(sched)
            )));
        }
        if self.kind != *kind {
            return Err(Error::Incompatible(format!("sampler {:?} differs from runtime {:?}", self.kind, kind)));
        }
        if (self.horizon, self.dim) != shape {
            return Err(Error::Incompatible(format!(
                "shape {:?} differs from runtime {:?}",
                (self.horizon, self.dim),
                shape
            )));
        }
        Ok(())
    }

    /// Serialized file image: magic, version, length-prefixed body, CRC32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = bincode::serialize(self).map_err(|e| Error::Encoding(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if len > (bytes.len() - 16).saturating_sub(4) as u64 {
            return Err(Error::Truncated);
        }
        let end = 16 + len as usize;
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let artifact: Self = bincode::deserialize(&bytes[16..end]).map_err(|e| Error::Encoding(e.to_string()))?;
        if artifact.version != version {
            return Err(Error::Encoding("header and body versions differ".into()));
        }
        Ok(artifact)
    }

    /// Hex SHA-256 of the file image.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Hex SHA-256 of a schedule's canonical encoding.
pub fn schedule_hash(sched: &NoiseSchedule) -> String {
    hex::encode(Sha256::digest(bincode::serialize(sched).expect("schedule encodes")))
}

pub fn save_artifact(artifact: &CalibrationArtifact, path: &Path) -> Result<()> {
    std::fs::write(path, artifact.to_bytes()?)?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<CalibrationArtifact> {
    CalibrationArtifact::from_bytes(&std::fs::read(path)?)
}

/// `U_t(s)`, or a reuse-forbidden error when `t` has no envelope.
pub fn evaluate_envelope(artifact: &CalibrationArtifact, t: usize, s: f64) -> Result<f64> {
    artifact.envelope(t).map(|e| e.evaluate(s)).ok_or(Error::ReuseForbidden { t })
}

//! Deviation metric, rate and interval estimators, calibration-quality
//! statistics and the eval-count speedup model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sampler::Trajectory;
use crate::{Error, Result};

/// Risk levels used for the calibration-error sweep.
pub const ALPHA_TARGETS: [f64; 4] = [0.01, 0.05, 0.10, 0.20];

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// `(1/√H) ‖a - b‖_F`.
pub fn deviation(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    Ok(a.distance(b)? / (a.horizon() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Result<Interval> {
    if n == 0 {
        return Err(Error::Empty("wilson interval needs n > 0"));
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Ok(Interval { lo: (center - half).max(0.0), hi: (center + half).min(1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub p_hat: f64,
    pub count: usize,
    pub n: usize,
    pub wilson95: Interval,
}

pub fn rate(count: usize, n: usize) -> Result<RateEstimate> {
    let wilson95 = wilson_interval(count, n, Z95)?;
    Ok(RateEstimate { p_hat: count as f64 / n as f64, count, n, wilson95 })
}

/// Fraction of deviations strictly above `eta`, with its Wilson interval.
pub fn violation_rate(ds: &[f64], eta: f64) -> Result<RateEstimate> {
    if ds.is_empty() {
        return Err(Error::Empty("violation rate of no decisions"));
    }
    rate(ds.iter().filter(|d| **d > eta).count(), ds.len())
}

/// Mean absolute gap between realized violation rates and their targets.
pub fn mace(realized: &[(f64, f64)], targets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("mace targets"));
    }
    let mut total = 0.0;
    for &alpha in targets {
        let p = realized
            .iter()
            .find(|(a, _)| (a - alpha).abs() <= 1e-12)
            .map(|(_, p)| *p)
            .ok_or(Error::MissingTarget(alpha))?;
        total += (p - alpha).abs();
    }
    Ok(total / targets.len() as f64)
}

/// `T (1 + r) / (T r + n_eval)` with `r = ℓ_Ψ / ℓ_core`.
pub fn speedup_model(steps: usize, n_eval_mean: f64, probe_cost_ratio: f64) -> f64 {
    let t = steps as f64;
    t * (1.0 + probe_cost_ratio) / (t * probe_cost_ratio + n_eval_mean)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], replicates: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap of no values"));
    }
    if replicates == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("replicates={replicates}, level={level}")));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..replicates)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Interval { lo: quantile_sorted(&means, tail), hi: quantile_sorted(&means, 1.0 - tail) })
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of no values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

/// Fraction of `(D̂, d)` pairs with `d ≤ D̂`.
pub fn certificate_reliability(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("certificate reliability of no pairs"));
    }
    Ok(pairs.iter().filter(|(d_hat, d)| d <= d_hat).count() as f64 / pairs.len() as f64)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Empty("spearman needs two points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Aggregate of one evaluation run. Field names are a stable schema; `None`
/// serializes as JSON `null` and an empty CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub label: String,
    pub config_hash: String,
    pub artifact_hash: String,
    pub steps: usize,
    pub alpha: f64,
    pub eta_traj: f64,
    pub decisions: usize,
    pub mean_d: Option<f64>,
    pub mean_d_ci_lo: Option<f64>,
    pub mean_d_ci_hi: Option<f64>,
    pub p_viol: Option<f64>,
    pub p_viol_lo: Option<f64>,
    pub p_viol_hi: Option<f64>,
    pub evals_per_t: f64,
    pub reuse_frac: f64,
    pub mean_evals: f64,
    pub mean_d_hat: f64,
    pub reliability: Option<f64>,
    pub probe_cost_ratio: f64,
    pub speedup_model: f64,
    pub mace: Option<f64>,
    pub success_rate: Option<f64>,
    pub collision_rate: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsBundle {
    pub const CSV_HEADER: &'static str = "label,config_hash,artifact_hash,steps,alpha,eta_traj,decisions,mean_d,mean_d_ci_lo,mean_d_ci_hi,p_viol,p_viol_lo,p_viol_hi,evals_per_t,reuse_frac,mean_evals,mean_d_hat,reliability,probe_cost_ratio,speedup_model,mace,success_rate,collision_rate";

    pub fn csv_row(&self) -> String {
        [
            self.label.clone(),
            self.config_hash.clone(),
            self.artifact_hash.clone(),
            self.steps.to_string(),
            format!("{}", self.alpha),
            format!("{}", self.eta_traj),
            self.decisions.to_string(),
            cell(self.mean_d),
            cell(self.mean_d_ci_lo),
            cell(self.mean_d_ci_hi),
            cell(self.p_viol),
            cell(self.p_viol_lo),
            cell(self.p_viol_hi),
            format!("{}", self.evals_per_t),
            format!("{}", self.reuse_frac),
            format!("{}", self.mean_evals),
            format!("{}", self.mean_d_hat),
            cell(self.reliability),
            format!("{}", self.probe_cost_ratio),
            format!("{}", self.speedup_model),
            cell(self.mace),
            cell(self.success_rate),
            cell(self.collision_rate),
        ]
        .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn deviation_hand_values() {
        let a = Trajectory::new(Array2::zeros((4, 2)));
        let b = Trajectory::new(Array2::ones((4, 2)));
        assert!((deviation(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(deviation(&a, &a).unwrap(), 0.0);
        let c = Trajectory::new(ndarray::array![[3.0, 4.0]]);
        assert_eq!(deviation(&Trajectory::zeros(1, 2), &c).unwrap(), 5.0);
        assert!(deviation(&a, &Trajectory::zeros(2, 2)).is_err());
    }

    #[test]
    fn violation_rate_hand_values() {
        let mut ds = vec![0.0; 144];
        ds.extend(vec![1.0; 6]);
        let r = violation_rate(&ds, 0.5).unwrap();
        assert!((r.p_hat - 0.04).abs() < 1e-15);
        // Closed form at p = 0.04, n = 150, z = 1.96.
        let (n, p, z) = (150.0f64, 0.04f64, 1.96f64);
        let d = 1.0 + z * z / n;
        let c = (p + z * z / (2.0 * n)) / d;
        let h = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / d;
        assert!((r.wilson95.lo - (c - h)).abs() < 1e-15);
        assert!((r.wilson95.hi - (c + h)).abs() < 1e-15);
        assert_eq!(violation_rate(&[0.1, 0.2], 0.5).unwrap().p_hat, 0.0);
        assert_eq!(violation_rate(&[0.1, 0.2], 0.0).unwrap().p_hat, 1.0);
        assert!(violation_rate(&[], 0.1).is_err());
    }

    #[test]
    fn mace_hand_values() {
        let realized: Vec<(f64, f64)> = ALPHA_TARGETS.iter().copied().zip([0.009, 0.049, 0.096, 0.21]).collect();
        assert!((mace(&realized, &ALPHA_TARGETS).unwrap() - 0.004).abs() < 1e-12);
        let zero: Vec<(f64, f64)> = ALPHA_TARGETS.iter().map(|a| (*a, 0.0)).collect();
        assert!((mace(&zero, &ALPHA_TARGETS).unwrap() - 0.09).abs() < 1e-12);
        let perfect: Vec<(f64, f64)> = ALPHA_TARGETS.iter().map(|a| (*a, *a)).collect();
        assert_eq!(mace(&perfect, &ALPHA_TARGETS).unwrap(), 0.0);
        assert!(matches!(mace(&zero[..3], &ALPHA_TARGETS), Err(Error::MissingTarget(_))));
    }

    #[test]
    fn speedup_hand_values() {
        assert_eq!(speedup_model(100, 25.0, 0.0), 4.0);
        assert!((speedup_model(100, 100.0, 0.37) - 1.0).abs() < 1e-15);
        let s = speedup_model(100, 17.0, 0.08);
        assert!((s - 108.0 / 25.0).abs() < 1e-12);
        assert!(s < 100.0 / 17.0);
    }

    #[test]
    fn bootstrap_degenerate_and_bounded() {
        let ci = bootstrap_ci(&[2.5; 10], 1000, 0.95, 3).unwrap();
        assert_eq!((ci.lo, ci.hi), (2.5, 2.5));
        let ci = bootstrap_ci(&[1.0, 3.0], 1000, 0.95, 3).unwrap();
        assert!(ci.lo >= 1.0 && ci.hi <= 3.0);
        assert_eq!(ci, bootstrap_ci(&[1.0, 3.0], 1000, 0.95, 3).unwrap());
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
    }

    #[test]
    fn reliability_hand_values() {
        assert_eq!(certificate_reliability(&[(0.0, 0.0), (0.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(certificate_reliability(&[(0.1, 0.2)]).unwrap(), 0.0);
        assert!(certificate_reliability(&[]).is_err());
    }

    #[test]
    fn spearman_hand_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let b = MetricsBundle {
            label: "x".into(),
            config_hash: "c".into(),
            artifact_hash: "a".into(),
            steps: 20,
            alpha: 0.05,
            eta_traj: 0.1,
            decisions: 3,
            mean_d: None,
            mean_d_ci_lo: None,
            mean_d_ci_hi: None,
            p_viol: None,
            p_viol_lo: None,
            p_viol_hi: None,
            evals_per_t: 0.5,
            reuse_frac: 0.5,
            mean_evals: 10.0,
            mean_d_hat: 0.0,
            reliability: None,
            probe_cost_ratio: 0.1,
            speedup_model: 1.5,
            mace: None,
            success_rate: None,
            collision_rate: None,
        };
        assert_eq!(b.csv_row().split(',').count(), MetricsBundle::CSV_HEADER.split(',').count());
        assert!(b.csv_row().contains(",,"));
    }
}

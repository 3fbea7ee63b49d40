use serde::{Deserialize, Serialize};

use super::eligible::ceil_tolerant;
use super::isotonic::{fit_isotonic, IsotonicFit};
use crate::metrics::quantile_sorted;
use crate::{Error, Result};

/// Lookup-table resolution per timestep.
pub const GRID_POINTS: usize = 256;
/// Empirical score range covered by the table.
pub const GRID_QUANTILES: (f64, f64) = (0.001, 0.999);

/// 1-based order-statistic index `min(⌈(n+1)(1-α)⌉, n)`.
pub fn conformal_rank(n: usize, alpha_step: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::Empty("conformal quantile of no residuals"));
    }
    if !(alpha_step > 0.0 && alpha_step < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_step {alpha_step} outside (0,1)")));
    }
    Ok(ceil_tolerant((n + 1) as f64 * (1.0 - alpha_step)).clamp(1, n))
}

pub fn conformal_quantile(residuals: &[f64], alpha_step: f64) -> Result<f64> {
    let k = conformal_rank(residuals.len(), alpha_step)?;
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Per-step upper envelope `U_t(s) = max(m_t(s) + q_t, 0)` tabulated on a
/// log-spaced score grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalEnvelope {
    pub step: usize,
    /// Isotonic mean `m_t` fitted on the training half.
    pub fit: IsotonicFit,
    pub q: f64,
    pub alpha_step: f64,
    pub n_train: usize,
    pub n_cal: usize,
    /// Grid scores, ascending; a single node when the score range is degenerate.
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl ConformalEnvelope {
    /// Splits are given as `(s, eps)`; `scores` spans all pairs at this step.
    pub fn fit(step: usize, train: &[(f64, f64)], cal: &[(f64, f64)], scores: &[f64], alpha_step: f64) -> Result<Self> {
        if cal.is_empty() {
            return Err(Error::Empty("calibration half"));
        }
        let m = fit_isotonic(train)?;
        let residuals: Vec<f64> = cal.iter().map(|(s, e)| e - m.eval(*s)).collect();
        let q = conformal_quantile(&residuals, alpha_step)?;

        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut lo = quantile_sorted(&sorted, GRID_QUANTILES.0);
        let hi = quantile_sorted(&sorted, GRID_QUANTILES.1);
        if lo <= 0.0 {
            lo = sorted.iter().copied().find(|s| *s > 0.0).unwrap_or(hi);
        }
        let grid: Vec<f64> = if !(hi > lo && lo > 0.0) {
            vec![hi]
        } else {
            let (a, b) = (lo.ln(), hi.ln());
            (0..GRID_POINTS)
                .map(|i| match i {
                    0 => lo,
                    i if i == GRID_POINTS - 1 => hi,
                    i => (a + (b - a) * i as f64 / (GRID_POINTS - 1) as f64).exp(),
                })
                .collect()
        };
        let values = grid.iter().map(|g| (m.eval(*g) + q).max(0.0)).collect();
        Ok(Self {
            step,
            fit: m,
            q,
            alpha_step,
            n_train: train.len(),
            n_cal: cal.len(),
            grid,
            values,
        })
    }

    /// Isotonic mean `m_t(s)`.
    pub fn mean(&self, s: f64) -> f64 {
        self.fit.eval(s)
    }

    /// Table lookup, linear in `ln s`, clamped at both ends.
    pub fn evaluate(&self, s: f64) -> f64 {
        let n = self.grid.len();
        if n == 1 || s <= self.grid[0] || s.is_nan() {
            return self.values[0];
        }
        if s >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let i = self.grid.partition_point(|g| *g <= s);
        let (g0, g1) = (self.grid[i - 1], self.grid[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        if g0 == s {
            return v0;
        }
        let w = (s.ln() - g0.ln()) / (g1.ln() - g0.ln());
        v0 + w * (v1 - v0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_fixtures() {
        let r: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        assert_eq!(conformal_rank(9, 0.1).unwrap(), 9);
        assert_eq!(conformal_quantile(&r, 0.1).unwrap(), 0.9);
        assert_eq!(conformal_rank(2048, 0.05 / 80.0).unwrap(), 2048);
        assert_eq!(conformal_quantile(&[0.4; 7], 0.3).unwrap(), 0.4);
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_rank(5, 0.0).is_err());
    }

    #[test]
    fn two_pairs_give_one_residual() {
        let env = ConformalEnvelope::fit(3, &[(0.5, 0.2)], &[(0.7, 0.5)], &[0.5, 0.7], 0.1).unwrap();
        assert_eq!((env.n_train, env.n_cal), (1, 1));
        assert!((env.q - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_scores_collapse_to_one_node() {
        let env = ConformalEnvelope::fit(2, &[(1.0, 0.1), (1.0, 0.3)], &[(1.0, 0.4)], &[1.0; 3], 0.2).unwrap();
        assert_eq!(env.grid.len(), 1);
        assert!((env.evaluate(0.01) - 0.4).abs() < 1e-15);
        assert_eq!(env.evaluate(0.01), env.evaluate(100.0));
    }

    #[test]
    fn lookup_contract() {
        let train: Vec<(f64, f64)> = (1..=50).map(|i| (i as f64 * 0.01, i as f64 * 0.002)).collect();
        let cal: Vec<(f64, f64)> = (1..=50).map(|i| (i as f64 * 0.0105, i as f64 * 0.0021)).collect();
        let scores: Vec<f64> = train.iter().chain(&cal).map(|p| p.0).collect();
        let env = ConformalEnvelope::fit(5, &train, &cal, &scores, 0.05).unwrap();
        assert_eq!(env.grid.len(), GRID_POINTS);
        assert_eq!(env.evaluate(env.grid[10]), env.values[10]);
        assert_eq!(env.evaluate(env.grid[0] * 0.5), env.values[0]);
        assert_eq!(env.evaluate(env.grid[255] * 2.0), env.values[255]);
        let mid = ((env.grid[10].ln() + env.grid[11].ln()) / 2.0).exp();
        assert!((env.evaluate(mid) - (env.values[10] + env.values[11]) / 2.0).abs() < 1e-12);
        assert!(env.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(env.values.iter().all(|v| *v >= 0.0));
    }
}

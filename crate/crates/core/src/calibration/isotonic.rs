use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Nondecreasing piecewise-linear fit through the pooled PAVA solution,
/// clamped to the end values outside the fitted score range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl IsotonicFit {
    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    pub fn eval(&self, s: f64) -> f64 {
        let n = self.xs.len();
        if s <= self.xs[0] {
            return self.ys[0];
        }
        if s >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|x| *x <= s);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let (y0, y1) = (self.ys[i - 1], self.ys[i]);
        if x0 == s {
            return y0;
        }
        y0 + (y1 - y0) * (s - x0) / (x1 - x0)
    }
}

/// Least-squares nondecreasing regression of `eps` on `s` (pool adjacent
/// violators). Pairs with equal scores are pooled first.
pub fn fit_isotonic(pairs: &[(f64, f64)]) -> Result<IsotonicFit> {
    if pairs.is_empty() {
        return Err(Error::Empty("isotonic fit of no pairs"));
    }
    if pairs.iter().any(|(s, e)| !s.is_finite() || !e.is_finite()) {
        return Err(Error::InvalidArgument("non-finite calibration pair".into()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (x, weighted mean, weight) per distinct score.
    let mut points: Vec<(f64, f64, f64)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match points.last_mut() {
            Some((x, y, w)) if *x == s => {
                *y = (*y * *w + e) / (*w + 1.0);
                *w += 1.0;
            }
            _ => points.push((s, e, 1.0)),
        }
    }

    // Blocks of (mean, weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(points.len());
    for &(_, y, w) in &points {
        blocks.push((y, w, 1));
        while blocks.len() > 1 {
            let (y2, w2, n2) = blocks[blocks.len() - 1];
            let (y1, w1, n1) = blocks[blocks.len() - 2];
            if y1 <= y2 {
                break;
            }
            blocks.pop();
            let merged = blocks.last_mut().expect("two blocks");
            *merged = ((y1 * w1 + y2 * w2) / (w1 + w2), w1 + w2, n1 + n2);
        }
    }

    let xs = points.iter().map(|p| p.0).collect();
    let ys = blocks.iter().flat_map(|&(y, _, n)| std::iter::repeat_n(y, n)).collect();
    Ok(IsotonicFit { xs, ys })
}

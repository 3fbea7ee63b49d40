use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Steps where reuse may happen: `k_suf < t ≤ T - k_pre`, never `t = T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibleSet {
    pub steps: usize,
    pub k_pre: usize,
    pub k_suf: usize,
    members: Vec<usize>,
}

impl EligibleSet {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, t: usize) -> bool {
        self.members.binary_search(&t).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `⌈x⌉` that ignores representation error just above an integer.
pub(crate) fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

pub fn eligible_timesteps(steps: usize, frac_pre: f64, frac_suf: f64) -> Result<EligibleSet> {
    for f in [frac_pre, frac_suf] {
        if !(0.0..0.5).contains(&f) {
            return Err(Error::InvalidArgument(format!("forbidden fraction {f} outside [0, 0.5)")));
        }
    }
    let k_pre = ceil_tolerant(frac_pre * steps as f64);
    let k_suf = ceil_tolerant(frac_suf * steps as f64);
    let upper = steps.saturating_sub(k_pre).min(steps.saturating_sub(1));
    let members = ((k_suf + 1)..=upper).collect();
    Ok(EligibleSet { steps, k_pre, k_suf, members })
}

/// Ghost-chain anchors: every non-eligible step plus eligible multiples of `stride`.
pub fn anchor_set(steps: usize, stride: usize, eligible: &EligibleSet) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("anchor stride must be >= 1".into()));
    }
    Ok((1..=steps).filter(|t| !eligible.contains(*t) || t % stride == 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forbidden_region_table() {
        let e = eligible_timesteps(100, 0.10, 0.10).unwrap();
        assert_eq!((e.k_pre, e.k_suf, e.len()), (10, 10, 80));
        assert_eq!(e.members().first(), Some(&11));
        assert_eq!(e.members().last(), Some(&90));
        let e = eligible_timesteps(16, 0.10, 0.10).unwrap();
        assert_eq!((e.k_pre, e.k_suf, e.len()), (2, 2, 12));
        let e = eligible_timesteps(3, 0.45, 0.45).unwrap();
        assert_eq!((e.k_pre, e.k_suf), (2, 2));
        assert!(e.is_empty());
    }

    #[test]
    fn last_step_is_never_eligible() {
        let e = eligible_timesteps(10, 0.0, 0.0).unwrap();
        assert_eq!(e.members(), &(1..=9).collect::<Vec<_>>()[..]);
        assert!(eligible_timesteps(10, 0.5, 0.0).is_err());
    }

    #[test]
    fn anchors_by_hand() {
        let e = eligible_timesteps(20, 0.10, 0.10).unwrap();
        assert_eq!(e.members(), &(3..=18).collect::<Vec<_>>()[..]);
        assert_eq!(anchor_set(20, 4, &e).unwrap(), vec![1, 2, 4, 8, 12, 16, 19, 20]);
        assert_eq!(anchor_set(20, 1, &e).unwrap(), (1..=20).collect::<Vec<_>>());
        assert_eq!(anchor_set(20, 21, &e).unwrap(), vec![1, 2, 19, 20]);
        assert!(anchor_set(20, 0, &e).is_err());
    }
}

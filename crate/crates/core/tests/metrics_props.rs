use muninn::metrics::{
    bootstrap_ci, certificate_reliability, deviation, mace, spearman, speedup_model, violation_rate, wilson_interval, Z95,
};
use muninn::sampler::Trajectory;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

fn traj() -> impl Strategy<Value = Trajectory> {
    prop::collection::vec(-4.0f64..4.0, 8).prop_map(|v| Trajectory::from_rows(4, 2, v).unwrap())
}

proptest! {
    #[test]
    fn deviation_is_a_metric(a in traj(), b in traj(), c in traj()) {
        let d = |x: &Trajectory, y: &Trajectory| deviation(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b) == 0.0, a == b);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn wilson_interval_is_a_subinterval_containing_the_estimate(n in 1usize..5000, frac in 0.0f64..=1.0) {
        let k = (frac * n as f64).round() as usize;
        let ci = wilson_interval(k, n, Z95).unwrap();
        prop_assert!(0.0 <= ci.lo && ci.lo <= ci.hi && ci.hi <= 1.0);
        prop_assert!(ci.contains(k as f64 / n as f64));
    }

    #[test]
    fn speedup_model_shape(steps in 2usize..500, frac in 0.01f64..=1.0, r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let n = (frac * steps as f64).max(1.0);
        prop_assert!((speedup_model(steps, n, 0.0) - steps as f64 / n).abs() <= 1e-12 * steps as f64);
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(speedup_model(steps, n, hi) <= speedup_model(steps, n, lo) + 1e-12);
        prop_assert!((speedup_model(steps, steps as f64, hi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_invariant(x in prop::collection::vec(-10.0f64..10.0, 2..50), y_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(y_seed);
        let y: Vec<f64> = x.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rho = spearman(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        let warped: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        prop_assert!((spearman(&warped, &y).unwrap() - rho).abs() < 1e-12);
        prop_assert!((spearman(&x, &warped).unwrap() - 1.0).abs() < 1e-12 || x.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn rate_and_reliability_hand_values() {
    let r = violation_rate(&[0.1, 0.2, 0.3, 0.4], 0.2).unwrap();
    assert_eq!((r.count, r.n, r.p_hat), (2, 4, 0.5));
    assert_eq!(certificate_reliability(&[(0.2, 0.1), (0.2, 0.2), (0.2, 0.3)]).unwrap(), 2.0 / 3.0);
    let m = mace(&[(0.01, 0.02), (0.05, 0.05), (0.1, 0.07), (0.2, 0.2)], &[0.01, 0.05, 0.1, 0.2]).unwrap();
    assert!((m - 0.01).abs() < 1e-15);
    assert!(mace(&[(0.01, 0.0)], &[0.05]).is_err());
    // 3 of 10 at z = 1.96, worked by hand from the score formula.
    let ci = wilson_interval(3, 10, Z95).unwrap();
    assert!((ci.lo - 0.107_789).abs() < 1e-5 && (ci.hi - 0.603_226).abs() < 1e-5);
}

/// The 95% percentile interval of the mean of skewed data covers the true
/// mean in roughly 95% of repeated experiments.
#[test]
fn bootstrap_meta_coverage() {
    let dist = Exp::new(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let trials = 400;
    let mut hits = 0;
    for trial in 0..trials {
        let sample: Vec<f64> = (0..200).map(|_| dist.sample(&mut rng)).collect();
        let ci = bootstrap_ci(&sample, 1000, 0.95, trial).unwrap();
        assert_eq!(ci, bootstrap_ci(&sample, 1000, 0.95, trial).unwrap());
        hits += usize::from(ci.contains(1.0));
    }
    let coverage = hits as f64 / trials as f64;
    assert!((0.90..=0.99).contains(&coverage), "coverage {coverage}");
}

//! Bound behavior beyond the hand-computed values: moment estimation
//! against synthetic Gaussians, monotonicity of both bound families,
//! and an empirical check of the collision exponential.

mod common;

use proptest::prelude::*;
use seal_core::bounds::{
    calibration_bound, collision_bound, estimate_moments, finetune_bound, geometric_bound,
    MomentEstimate,
};
use seal_core::{Rng, Tensor};

#[test]
fn moment_estimation_recovers_gaussian_moments() {
    let dim = 50;
    let mut rng = Rng::new(0xB0);
    let samples: Vec<Tensor> = (0..100_000).map(|_| rng.normal_tensor(&[dim])).collect();
    let est = estimate_moments(&samples).unwrap();
    assert_eq!(est.dim, dim);
    assert_eq!(est.samples, 100_000);
    assert!((est.cov_trace - dim as f64).abs() <= 1.0, "trace {}", est.cov_trace);
    assert!(est.mean_norm <= 0.05, "mean norm {}", est.mean_norm);
}

#[test]
fn moment_estimation_edge_cases() {
    let one = vec![Tensor::from_vec(vec![1.0, 2.0])];
    assert!(estimate_moments(&one).is_err());

    let same = vec![Tensor::from_vec(vec![3.0, 4.0]); 5];
    let est = estimate_moments(&same).unwrap();
    assert_eq!(est.cov_trace, 0.0);
    assert!((est.mean_norm - 5.0).abs() <= 1e-6);
}

/// With the trace held fixed, spreading it over more coordinates
/// shrinks the chance a random direction aligns with the data.
#[test]
fn geometric_bound_decreases_in_dimension() {
    let mut last = f64::INFINITY;
    for exp in 1..=10 {
        let d = 1usize << exp;
        let est = MomentEstimate::exact(d, 0.0, 1.0);
        let value = geometric_bound(&est, 1.0).unwrap().value;
        assert!(value < last, "d={d}: {value} !< {last}");
        last = value;
    }
}

#[test]
fn calibration_bound_shrinks_with_more_samples() {
    let mut last = f64::INFINITY;
    for m in [100usize, 1_000, 10_000, 100_000] {
        let value = calibration_bound(m, 0).unwrap().value;
        assert!(value < last, "m={m}: {value} !< {last}");
        last = value;
    }

    // Non-increasing in m at a fixed exceedance fraction as well.
    let mut last = f64::INFINITY;
    for m in [100usize, 1_000, 10_000] {
        let value = calibration_bound(m, m / 10).unwrap().value;
        assert!(value <= last, "m={m}: {value} > {last}");
        last = value;
    }
}

#[test]
fn collision_bound_holds_empirically() {
    let (dim, theta) = (100usize, 0.5);
    let bound = collision_bound(dim, theta).unwrap().value;
    assert!((bound - (-12.5f64).exp()).abs() <= 1e-12);

    let mut rng = Rng::new(0xB1);
    let mut hits = 0usize;
    let pairs = 10_000;
    for _ in 0..pairs {
        let a = rng.unit_sphere(dim).unwrap();
        let b = rng.unit_sphere(dim).unwrap();
        if a.dot(&b).unwrap() > theta {
            hits += 1;
        }
    }
    assert!(
        (hits as f64 / pairs as f64) <= bound,
        "{hits} collisions in {pairs} pairs"
    );
}

proptest! {
    /// Larger margins can only help: the geometric bound is
    /// non-increasing in the threshold and strictly decreasing wherever
    /// it is not clamped.
    #[test]
    fn geometric_bound_monotone_in_threshold(
        dim in 2usize..512,
        mean_norm in 0.0f64..2.0,
        cov_trace in 0.01f64..50.0,
        margin in 0.05f64..3.0,
        step in 0.05f64..2.0,
    ) {
        let est = MomentEstimate::exact(dim, mean_norm, cov_trace);
        let lo = geometric_bound(&est, mean_norm + margin).unwrap();
        let hi = geometric_bound(&est, mean_norm + margin + step).unwrap();
        prop_assert!(hi.value <= lo.value);
        if !lo.clamped && !hi.clamped {
            prop_assert!(hi.value < lo.value);
        }
        prop_assert!((0.0..=1.0).contains(&lo.value));
        prop_assert!((0.0..=1.0).contains(&hi.value));
    }

    /// A perturbation allowance weakens the certificate, reducing to the
    /// plain bound at zero.
    #[test]
    fn finetune_bound_degrades_with_perturbation(
        dim in 2usize..512,
        mean_norm in 0.0f64..2.0,
        cov_trace in 0.01f64..50.0,
        margin in 0.2f64..3.0,
        pert in 0.01f64..0.15,
    ) {
        let est = MomentEstimate::exact(dim, mean_norm, cov_trace);
        let threshold = mean_norm + margin;
        let base = finetune_bound(&est, threshold, 0.0).unwrap();
        let plain = geometric_bound(&est, threshold).unwrap();
        prop_assert_eq!(base.value, plain.value);
        let worse = finetune_bound(&est, threshold, pert).unwrap();
        prop_assert!(worse.value >= base.value);
        if !worse.clamped && !base.clamped {
            prop_assert!(worse.value > base.value);
        }
    }

    /// More observed exceedances always weaken the calibration claim.
    #[test]
    fn calibration_bound_monotone_in_exceedances(
        m in 10usize..5000,
        split in 0.0f64..1.0,
    ) {
        let n1 = ((m as f64) * split * 0.5) as usize;
        let n2 = ((m as f64) * split) as usize;
        let lo = calibration_bound(m, n1).unwrap().value;
        let hi = calibration_bound(m, n2).unwrap().value;
        prop_assert!(hi >= lo, "n {n1} -> {lo}, n {n2} -> {hi}");
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!((0.0..=1.0).contains(&hi));
    }
}

//! Monte-Carlo validation of the probability bounds: empirical
//! exceedance rates must respect the analytic values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{calibration_bound, geometric_bound, MomentEstimate};
use crate::error::{Result, SealError};
use crate::rng::{derive_seed, Rng};

/// Feature distribution the geometric bound is validated against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum McDist {
    /// Zero-mean unit-covariance Gaussian: trace d, mean norm 0.
    StandardGaussian,
    /// All mass on one fixed vector: trace 0, mean norm as given.
    PointMass { norm: f64 },
}

impl McDist {
    fn moments(&self, dim: usize) -> MomentEstimate {
        match self {
            McDist::StandardGaussian => MomentEstimate::exact(dim, 0.0, dim as f64),
            McDist::PointMass { norm } => MomentEstimate::exact(dim, *norm, 0.0),
        }
    }
}

/// One (dimension, threshold) cell of the validation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricTrialRow {
    pub dim: usize,
    pub threshold: f64,
    pub bound: f64,
    pub trials: usize,
    pub samples_per_trial: usize,
    /// Trials whose empirical rate exceeded the bound beyond three
    /// binomial standard deviations.
    pub failures: usize,
    pub max_rate: f64,
}

/// Draws random unit detectors against the given feature distribution
/// and checks, for every (dimension, threshold) pair, that the
/// empirical exceedance rate stays inside the geometric bound plus
/// binomial noise.
pub fn validate_geometric_bound(
    dims: &[usize],
    dist: McDist,
    thresholds: &[f64],
    trials: usize,
    samples_per_trial: usize,
    seed: u64,
) -> Result<Vec<GeometricTrialRow>> {
    if trials == 0 || samples_per_trial == 0 {
        return Err(SealError::InvalidArgument(
            "trials and samples per trial must be positive".into(),
        ));
    }
    let cells: Vec<(usize, f64)> = dims
        .iter()
        .flat_map(|&d| thresholds.iter().map(move |&t| (d, t)))
        .collect();
    cells
        .par_iter()
        .enumerate()
        .map(|(cell, &(dim, threshold))| {
            let bound = geometric_bound(&dist.moments(dim), threshold)?.value;
            let noise = 3.0 * (bound * (1.0 - bound) / samples_per_trial as f64).sqrt();
            let mut rng = Rng::new(derive_seed(seed, cell as u64));
            let mut failures = 0;
            let mut max_rate: f64 = 0.0;
            for _ in 0..trials {
                let detector = rng.unit_sphere(dim)?;
                let mut exceed = 0usize;
                for _ in 0..samples_per_trial {
                    let response: f64 = match dist {
                        McDist::StandardGaussian => detector
                            .data()
                            .iter()
                            .map(|&v| v as f64 * rng.normal())
                            .sum(),
                        McDist::PointMass { norm } => detector.data()[0] as f64 * norm,
                    };
                    if response > threshold {
                        exceed += 1;
                    }
                }
                let rate = exceed as f64 / samples_per_trial as f64;
                max_rate = max_rate.max(rate);
                if rate > bound + noise + 1e-12 {
                    failures += 1;
                }
            }
            Ok(GeometricTrialRow {
                dim,
                threshold,
                bound,
                trials,
                samples_per_trial,
                failures,
                max_rate,
            })
        })
        .collect()
}

/// Outcome of replaying the calibration bound: how often a freshly
/// drawn sample set exceeded the guaranteed false-positive rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrialReport {
    pub calibration_samples: usize,
    pub fresh_samples: usize,
    pub repeats: usize,
    pub bound: f64,
    /// Repeats whose fresh exceedance rate was above the bound.
    pub violations: usize,
    pub violation_rate: f64,
}

/// Repeatedly calibrates a threshold as the maximum of `calibration`
/// i.i.d. responses, then measures the fraction of `fresh` new
/// responses above it; counts how often that fraction violates the
/// calibration bound (at zero exceedances).
pub fn validate_calibration_bound(
    calibration: usize,
    fresh: usize,
    repeats: usize,
    seed: u64,
) -> Result<CalibrationTrialReport> {
    if calibration == 0 || fresh == 0 || repeats == 0 {
        return Err(SealError::InvalidArgument(
            "calibration, fresh, and repeats must be positive".into(),
        ));
    }
    let bound = calibration_bound(calibration, 0)?.value;
    let violations: usize = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = Rng::new(derive_seed(seed, r as u64));
            let mut threshold = f64::NEG_INFINITY;
            for _ in 0..calibration {
                threshold = threshold.max(rng.normal());
            }
            let exceed = (0..fresh).filter(|_| rng.normal() > threshold).count();
            usize::from(exceed as f64 / fresh as f64 > bound)
        })
        .sum();
    Ok(CalibrationTrialReport {
        calibration_samples: calibration,
        fresh_samples: fresh,
        repeats,
        bound,
        violations,
        violation_rate: violations as f64 / repeats as f64,
    })
}

/// One row per (dimension, threshold) cell.
pub fn geometric_csv(rows: &[GeometricTrialRow]) -> String {
    let mut out =
        String::from("dim,threshold,bound,trials,samples_per_trial,failures,max_rate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dim, r.threshold, r.bound, r.trials, r.samples_per_trial, r.failures, r.max_rate
        ));
    }
    out
}

pub fn calibration_csv(report: &CalibrationTrialReport) -> String {
    format!(
        "calibration_samples,fresh_samples,repeats,bound,violations,violation_rate\n{},{},{},{},{},{}\n",
        report.calibration_samples,
        report.fresh_samples,
        report.repeats,
        report.bound,
        report.violations,
        report.violation_rate
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_never_fails_above_its_norm() {
        let rows = validate_geometric_bound(
            &[8, 32],
            McDist::PointMass { norm: 1.0 },
            &[1.5, 2.0],
            20,
            200,
            7,
        )
        .unwrap();
        for r in &rows {
            assert_eq!(r.failures, 0, "dim {} threshold {}", r.dim, r.threshold);
            assert_eq!(r.bound, 0.0);
            assert_eq!(r.max_rate, 0.0);
        }
    }

    #[test]
    fn gaussian_respects_the_bound() {
        let rows = validate_geometric_bound(
            &[16, 64],
            McDist::StandardGaussian,
            &[2.0, 3.0],
            20,
            500,
            8,
        )
        .unwrap();
        for r in &rows {
            assert_eq!(r.failures, 0, "dim {} threshold {}", r.dim, r.threshold);
            assert!(r.bound > 0.0);
        }
    }

    #[test]
    fn calibration_violations_are_rare() {
        let report = validate_calibration_bound(500, 400, 60, 9).unwrap();
        assert!(
            report.violation_rate <= 0.05,
            "rate {}",
            report.violation_rate
        );
        assert!(report.bound > 0.0 && report.bound < 0.2);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let rows = validate_geometric_bound(
            &[8],
            McDist::StandardGaussian,
            &[2.0, 2.5, 3.0],
            5,
            100,
            10,
        )
        .unwrap();
        let csv = geometric_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
    }
}

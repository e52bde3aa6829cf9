//! False-positive certificates for planted detectors.
//!
//! Each bound limits the probability that an *innocent* input — one
//! drawn from the data distribution rather than built from the trigger —
//! fires a detector. The geometric bound needs only the feature moments;
//! the calibration bound needs only sample counts; both are distribution-
//! free in complementary ways.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SealError};
use crate::math::ln_gamma;
use crate::tensor::{covariance_trace, sample_mean, Tensor};

/// First and second moments of a feature distribution, as used by the
/// geometric bound: dimension, norm of the mean, and covariance trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub dim: usize,
    pub mean_norm: f64,
    pub cov_trace: f64,
    /// Feature vectors the estimate was computed from (0 when the
    /// moments are exact, i.e. supplied analytically).
    pub samples: usize,
}

impl MomentEstimate {
    /// Moments known in closed form rather than estimated.
    pub fn exact(dim: usize, mean_norm: f64, cov_trace: f64) -> MomentEstimate {
        MomentEstimate {
            dim,
            mean_norm,
            cov_trace,
            samples: 0,
        }
    }
}

/// Estimates feature moments from rank-1 feature vectors (unbiased
/// covariance trace, f64 accumulation).
pub fn estimate_moments(features: &[Tensor]) -> Result<MomentEstimate> {
    if features.len() < 2 {
        return Err(SealError::InvalidArgument(format!(
            "moment estimation needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    for (i, f) in features.iter().enumerate() {
        if f.rank() != 1 || f.len() != dim {
            return Err(SealError::ShapeMismatch(format!(
                "feature {i} has shape {:?}, expected [{dim}]",
                f.shape()
            )));
        }
    }
    let mean = sample_mean(features)?;
    let mean_norm = mean.norm();
    let cov_trace = covariance_trace(features)?;
    Ok(MomentEstimate {
        dim,
        mean_norm,
        cov_trace,
        samples: features.len(),
    })
}

/// Which quantity a certificate bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// P(detector response >= threshold) for a random unit detector
    /// against a fixed feature distribution.
    Geometric,
    /// P(a fresh innocent input exceeds the calibrated threshold),
    /// from calibration sample counts alone.
    Calibration,
    /// Geometric bound re-centered after a bounded weight perturbation
    /// (fine-tuning robustness).
    Finetune,
    /// P(an independently drawn detector lands within angle theta of an
    /// existing one) — accidental collision of two stains.
    Collision,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::Geometric => "geometric",
            BoundKind::Calibration => "calibration",
            BoundKind::Finetune => "finetune",
            BoundKind::Collision => "collision",
        }
    }
}

/// Inputs a certificate was computed from, kept typed so a stored
/// certificate can be audited and recomputed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundInputs {
    Geometric {
        dim: usize,
        mean_norm: f64,
        cov_trace: f64,
        threshold: f64,
    },
    Calibration {
        calibration_samples: usize,
        exceedances: usize,
    },
    Finetune {
        dim: usize,
        mean_norm: f64,
        cov_trace: f64,
        threshold: f64,
        perturbation: f64,
    },
    Collision {
        dim: usize,
        angle: f64,
    },
}

/// A certified false-positive bound plus everything needed to audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub kind: BoundKind,
    /// The bound itself, clamped to [0, 1].
    pub value: f64,
    /// Whether clamping changed the raw value.
    pub clamped: bool,
    pub inputs: BoundInputs,
    /// True when the moments came from samples rather than closed form.
    pub estimated_moments: bool,
    /// Seed of the run that produced the inputs, when applicable.
    pub seed: Option<u64>,
    pub toolkit_version: String,
}

fn certificate(
    kind: BoundKind,
    raw: f64,
    inputs: BoundInputs,
    estimated_moments: bool,
) -> BoundCertificate {
    let value = raw.clamp(0.0, 1.0);
    BoundCertificate {
        kind,
        value,
        clamped: value != raw,
        inputs,
        estimated_moments,
        seed: None,
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
    }
}

/// Squared ratio Gamma(d/2) / Gamma((d+1)/2), via `ln_gamma` so large
/// dimensions cannot overflow.
fn gamma_ratio_sq(dim: usize) -> f64 {
    let d = dim as f64;
    (2.0 * (ln_gamma(d / 2.0) - ln_gamma((d + 1.0) / 2.0))).exp()
}

fn geometric_raw(dim: usize, mean_norm: f64, cov_trace: f64, threshold: f64) -> Result<f64> {
    if dim < 2 {
        return Err(SealError::InvalidArgument(format!(
            "geometric bound needs dimension >= 2, got {dim}"
        )));
    }
    if !(cov_trace >= 0.0) || !cov_trace.is_finite() || !mean_norm.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "bad moments: mean norm {mean_norm}, covariance trace {cov_trace}"
        )));
    }
    let gap = threshold - mean_norm;
    if !(gap > 0.0) {
        return Err(SealError::Precondition(format!(
            "threshold {threshold} must exceed the feature mean norm {mean_norm}; \
             the geometric bound is vacuous otherwise"
        )));
    }
    let d = dim as f64;
    Ok(cov_trace / (2.0 * gap * gap) * ((d - 1.0) / (d + 1.0)) * gamma_ratio_sq(dim))
}

/// Geometric false-positive bound: for a detector drawn uniformly from
/// the unit sphere in `dim` dimensions and features with the given
/// moments, the probability that the raw readout reaches `threshold`
/// is at most
///
/// ```text
/// tr(Cov) / (2 (threshold - |mean|)^2) * (d-1)/(d+1) * (Gamma(d/2) / Gamma((d+1)/2))^2
/// ```
pub fn geometric_bound(moments: &MomentEstimate, threshold: f64) -> Result<BoundCertificate> {
    let raw = geometric_raw(moments.dim, moments.mean_norm, moments.cov_trace, threshold)?;
    Ok(certificate(
        BoundKind::Geometric,
        raw,
        BoundInputs::Geometric {
            dim: moments.dim,
            mean_norm: moments.mean_norm,
            cov_trace: moments.cov_trace,
            threshold,
        },
        moments.samples > 0,
    ))
}

/// Same bound after the network weights move by at most `perturbation`
/// in the detector's readout (fine-tuning): the threshold margin
/// shrinks by that amount.
pub fn finetune_bound(
    moments: &MomentEstimate,
    threshold: f64,
    perturbation: f64,
) -> Result<BoundCertificate> {
    if !(perturbation >= 0.0) || !perturbation.is_finite() {
        return Err(SealError::InvalidArgument(format!(
            "perturbation must be non-negative and finite, got {perturbation}"
        )));
    }
    let raw = geometric_raw(
        moments.dim,
        moments.mean_norm + perturbation,
        moments.cov_trace,
        threshold,
    )?;
    Ok(certificate(
        BoundKind::Finetune,
        raw,
        BoundInputs::Finetune {
            dim: moments.dim,
            mean_norm: moments.mean_norm,
            cov_trace: moments.cov_trace,
            threshold,
            perturbation,
        },
        moments.samples > 0,
    ))
}

// Grid and refinement settings for the calibration bound's inner
// maximization.
const CALIB_GRID: usize = 100_000;
const CALIB_REFINE_WIDTH: f64 = 1e-9;

fn calibration_objective(m: f64, n: f64, eps: f64) -> f64 {
    // Each factor is a probability term; below zero it guarantees
    // nothing, so it contributes nothing.
    let mass = ((m - n) / m - eps).max(0.0);
    let confidence = (1.0 - 2.0 * (-2.0 * m * eps * eps).exp()).max(0.0);
    mass * confidence
}

/// Calibration false-positive bound: if a threshold is set so that `n`
/// of `m` calibration samples exceed it, the probability mass above the
/// threshold is, with the stated confidence folded in, at least
///
/// ```text
/// sup_eps ((m - n)/m - eps) * (1 - 2 exp(-2 m eps^2))
/// ```
///
/// below the threshold; the returned certificate bounds the exceedance
/// probability `1 - sup(...)`. The supremum is found on a dense grid
/// and sharpened by ternary search.
pub fn calibration_bound(
    calibration_samples: usize,
    exceedances: usize,
) -> Result<BoundCertificate> {
    if calibration_samples == 0 {
        return Err(SealError::InvalidArgument(
            "calibration bound needs at least one sample".into(),
        ));
    }
    if exceedances > calibration_samples {
        return Err(SealError::InvalidArgument(format!(
            "exceedances {exceedances} cannot outnumber samples {calibration_samples}"
        )));
    }
    let m = calibration_samples as f64;
    let n = exceedances as f64;

    let mut best_eps = 0.0f64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=CALIB_GRID {
        let eps = i as f64 / CALIB_GRID as f64;
        let v = calibration_objective(m, n, eps);
        if v > best {
            best = v;
            best_eps = eps;
        }
    }
    // The objective is smooth with a single interior peak; tighten
    // around the best grid point.
    let cell = 1.0 / CALIB_GRID as f64;
    let mut lo = (best_eps - cell).max(0.0);
    let mut hi = (best_eps + cell).min(1.0);
    while hi - lo > CALIB_REFINE_WIDTH {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if calibration_objective(m, n, a) < calibration_objective(m, n, b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let eps = 0.5 * (lo + hi);
    let sup = calibration_objective(m, n, eps).max(best);

    Ok(certificate(
        BoundKind::Calibration,
        1.0 - sup,
        BoundInputs::Calibration {
            calibration_samples,
            exceedances,
        },
        false,
    ))
}

/// Collision bound: the probability that a fresh uniformly-drawn unit
/// detector lands within angle `theta` (radians) of a fixed direction
/// in `dim` dimensions is at most `exp(-dim * theta^2 / 2)` for theta
/// in (0, pi/2].
pub fn collision_bound(dim: usize, theta: f64) -> Result<BoundCertificate> {
    if dim == 0 {
        return Err(SealError::InvalidArgument(
            "collision bound needs dimension >= 1".into(),
        ));
    }
    if !(theta > 0.0) || theta > std::f64::consts::FRAC_PI_2 {
        return Err(SealError::InvalidArgument(format!(
            "collision angle must lie in (0, pi/2], got {theta}"
        )));
    }
    let raw = (-(dim as f64) * theta * theta / 2.0).exp();
    Ok(certificate(
        BoundKind::Collision,
        raw,
        BoundInputs::Collision { dim, angle: theta },
        false,
    ))
}

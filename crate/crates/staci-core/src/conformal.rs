//! Conformal scoring, calibration, prediction regions, and the adaptive
//! confidence-level update.
//!
//! Region shapes:
//! - ellipsoid: quadratic score `e^T A e` against a scalar threshold;
//! - sphere: the ellipsoid with `A = Identity`, kept as its own code path so
//!   the equivalence is testable;
//! - square: per-dimension absolute-residual scores calibrated at level
//!   `1 - alpha/I` (Bonferroni), producing an axis-aligned box.
//!
//! The calibrated threshold is the `ceil((1-alpha)(n+1))`-th smallest score.
//! When that rank exceeds `n` the region is the full space (`+inf`); when the
//! adaptive level drives the rank to zero or below, a `-inf` sentinel yields
//! the empty region. Membership is `<=` on the boundary.

use nalgebra::DVector;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::covariance::ScoreMatrix;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("empty calibration score list")]
    EmptyScores,
    #[error("dimension mismatch: residual has {got}, score matrix expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("target miscoverage {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("calibration state shape does not match the region spec")]
    ShapeMismatch,
    #[error(transparent)]
    Covariance(#[from] crate::covariance::CovarianceError),
}

/// Region shape plus the target miscoverage level.
#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub shape: Shape,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub enum Shape {
    Ellipsoid(ScoreMatrix),
    Sphere,
    Square,
}

impl RegionSpec {
    pub fn new(shape: Shape, alpha: f64) -> Result<Self, ConformalError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ConformalError::InvalidAlpha(alpha));
        }
        Ok(Self { shape, alpha })
    }
}

/// Quadratic nonconformity score `residual^T A residual`.
pub fn score(residual: &DVector<f64>, a: &ScoreMatrix) -> Result<f64, ConformalError> {
    if residual.len() != a.dim() {
        return Err(ConformalError::DimensionMismatch { got: residual.len(), expected: a.dim() });
    }
    Ok((residual.transpose() * a.matrix() * residual)[(0, 0)])
}

/// The `ceil((1-alpha)(n+1))`-th smallest calibration score.
///
/// Rank above `n` returns `+inf` (full space); rank at or below zero returns
/// `-inf` (empty region), which the adaptive update can reach when it pushes
/// the working level to 1 or beyond. Duplicate scores are kept.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    let n = scores.len();
    if n == 0 {
        return Err(ConformalError::EmptyScores);
    }
    let k = quantile_rank(n, alpha);
    if k > n as i64 {
        return Ok(f64::INFINITY);
    }
    if k <= 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(k - 1) as usize])
}

/// Rank `ceil((1-alpha)(n+1))`, nudged so exact integer products do not land
/// one rank high through floating-point noise.
fn quantile_rank(n: usize, alpha: f64) -> i64 {
    let v = (1.0 - alpha) * (n as f64 + 1.0);
    (v - 1e-9).ceil() as i64
}

/// Per-shape calibration scores.
#[derive(Debug, Clone)]
pub enum ScoreSample {
    Scalar(Vec<f64>),
    /// One absolute-residual list per dimension.
    PerDimension(Vec<Vec<f64>>),
}

/// Per-shape calibrated threshold(s).
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    Scalar(f64),
    PerDimension(Vec<f64>),
}

impl Threshold {
    /// Scalar view for the trace: the box shape reports its widest half-width.
    pub fn as_scalar(&self) -> f64 {
        match self {
            Threshold::Scalar(q) => *q,
            Threshold::PerDimension(qs) => qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Calibrated state: score sample, threshold at the current working level,
/// and the calibration residual mean reused to center test residuals.
#[derive(Debug, Clone)]
pub struct CalibrationState {
    scores: ScoreSample,
    threshold: Threshold,
    alpha_t: f64,
    epsilon_bar: DVector<f64>,
}

impl CalibrationState {
    /// Calibrates from raw residuals: centers them, scores them per the spec
    /// shape, and computes the threshold at the spec's target level.
    pub fn calibrate(raw_residuals: &[DVector<f64>], spec: &RegionSpec) -> Result<Self, ConformalError> {
        if raw_residuals.is_empty() {
            return Err(ConformalError::EmptyScores);
        }
        let (centered, mean) = crate::covariance::center_residuals(raw_residuals)?;
        Self::from_centered(&centered, mean, spec, spec.alpha)
    }

    /// Calibrates from already-centered residuals (the harness centers once
    /// and reuses the mean for the covariance pipeline).
    pub fn from_centered(
        centered: &[DVector<f64>],
        epsilon_bar: DVector<f64>,
        spec: &RegionSpec,
        alpha_t: f64,
    ) -> Result<Self, ConformalError> {
        if centered.is_empty() {
            return Err(ConformalError::EmptyScores);
        }
        let scores = match &spec.shape {
            Shape::Ellipsoid(a) => ScoreSample::Scalar(
                centered.iter().map(|r| score(r, a)).collect::<Result<_, _>>()?,
            ),
            Shape::Sphere => {
                ScoreSample::Scalar(centered.iter().map(|r| r.norm_squared()).collect())
            }
            Shape::Square => {
                let dim = centered[0].len();
                let mut per_dim = vec![Vec::with_capacity(centered.len()); dim];
                for r in centered {
                    for (i, lists) in per_dim.iter_mut().enumerate() {
                        lists.push(r[i].abs());
                    }
                }
                ScoreSample::PerDimension(per_dim)
            }
        };
        let threshold = compute_threshold(&scores, alpha_t)?;
        Ok(Self { scores, threshold, alpha_t, epsilon_bar })
    }

    /// Re-derives the threshold from the stored scores at a new working level.
    pub fn set_alpha(&mut self, alpha_t: f64) -> Result<(), ConformalError> {
        self.alpha_t = alpha_t;
        self.threshold = compute_threshold(&self.scores, alpha_t)?;
        Ok(())
    }

    pub fn alpha_t(&self) -> f64 {
        self.alpha_t
    }

    pub fn threshold(&self) -> &Threshold {
        &self.threshold
    }

    pub fn epsilon_bar(&self) -> &DVector<f64> {
        &self.epsilon_bar
    }

    pub fn scores(&self) -> &ScoreSample {
        &self.scores
    }

    pub fn len(&self) -> usize {
        match &self.scores {
            ScoreSample::Scalar(s) => s.len(),
            ScoreSample::PerDimension(d) => d.first().map_or(0, Vec::len),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn compute_threshold(scores: &ScoreSample, alpha_t: f64) -> Result<Threshold, ConformalError> {
    match scores {
        ScoreSample::Scalar(s) => Ok(Threshold::Scalar(conformal_quantile(s, alpha_t)?)),
        ScoreSample::PerDimension(dims) => {
            let level = alpha_t / dims.len() as f64;
            let qs = dims
                .iter()
                .map(|d| conformal_quantile(d, level))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Threshold::PerDimension(qs))
        }
    }
}

/// A concrete prediction region centered at `prediction + epsilon_bar`.
#[derive(Debug, Clone)]
pub struct PredictionRegion {
    pub center: DVector<f64>,
    pub kind: RegionKind,
}

#[derive(Debug, Clone)]
pub enum RegionKind {
    Ellipsoid { matrix: ScoreMatrix, threshold: f64 },
    Sphere { threshold: f64 },
    Box { half_widths: Vec<f64> },
}

/// Builds the region for a point prediction from a calibrated state.
pub fn build_region(
    prediction: &DVector<f64>,
    state: &CalibrationState,
    spec: &RegionSpec,
) -> Result<PredictionRegion, ConformalError> {
    let center = prediction + state.epsilon_bar();
    let kind = match (&spec.shape, state.threshold()) {
        (Shape::Ellipsoid(a), Threshold::Scalar(q)) => {
            if center.len() != a.dim() {
                return Err(ConformalError::DimensionMismatch {
                    got: center.len(),
                    expected: a.dim(),
                });
            }
            RegionKind::Ellipsoid { matrix: a.clone(), threshold: *q }
        }
        (Shape::Sphere, Threshold::Scalar(q)) => RegionKind::Sphere { threshold: *q },
        (Shape::Square, Threshold::PerDimension(qs)) => {
            if center.len() != qs.len() {
                return Err(ConformalError::DimensionMismatch {
                    got: center.len(),
                    expected: qs.len(),
                });
            }
            RegionKind::Box { half_widths: qs.clone() }
        }
        _ => return Err(ConformalError::ShapeMismatch),
    };
    Ok(PredictionRegion { center, kind })
}

/// Exact membership test; the boundary belongs to the region.
pub fn contains(region: &PredictionRegion, y: &DVector<f64>) -> Result<bool, ConformalError> {
    if y.len() != region.center.len() {
        return Err(ConformalError::DimensionMismatch {
            got: y.len(),
            expected: region.center.len(),
        });
    }
    let dev = y - &region.center;
    Ok(match &region.kind {
        RegionKind::Ellipsoid { matrix, threshold } => score(&dev, matrix)? <= *threshold,
        RegionKind::Sphere { threshold } => dev.norm_squared() <= *threshold,
        RegionKind::Box { half_widths } => {
            dev.iter().zip(half_widths).all(|(d, q)| d.abs() <= *q)
        }
    })
}

/// I-th root of the region volume. Full-space regions return `+inf`, empty
/// regions 0. Computed in log space so high dimensions stay finite.
pub fn region_volume_scaled(region: &PredictionRegion) -> f64 {
    let dim = region.center.len() as f64;
    match &region.kind {
        RegionKind::Ellipsoid { matrix, threshold } => {
            ellipsoid_volume_scaled(dim, *threshold, matrix.det())
        }
        RegionKind::Sphere { threshold } => ellipsoid_volume_scaled(dim, *threshold, 1.0),
        RegionKind::Box { half_widths } => {
            if half_widths.iter().any(|q| q.is_infinite() && *q > 0.0) {
                return f64::INFINITY;
            }
            if half_widths.iter().any(|q| *q <= 0.0 || q.is_nan()) {
                return 0.0;
            }
            let log_v: f64 = half_widths.iter().map(|q| (2.0 * q).ln()).sum();
            (log_v / dim).exp()
        }
    }
}

/// `[pi^{I/2} / Gamma(I/2 + 1) * q^{I/2} * det(A)^{-1/2}]^{1/I}`.
fn ellipsoid_volume_scaled(dim: f64, threshold: f64, det: f64) -> f64 {
    if threshold == f64::INFINITY {
        return f64::INFINITY;
    }
    if threshold <= 0.0 || threshold.is_nan() {
        return 0.0;
    }
    let log_v = 0.5 * dim * std::f64::consts::PI.ln() - ln_gamma(0.5 * dim + 1.0)
        + 0.5 * dim * threshold.ln()
        - 0.5 * det.ln();
    (log_v / dim).exp()
}

/// One step of the adaptive confidence-level recursion:
/// `alpha + gamma * (target - miss)`. Deliberately unclipped — out-of-range
/// levels map to full-space or empty regions through the quantile rank.
pub fn aci_update(alpha_t: f64, covered: bool, alpha_target: f64, gamma: f64) -> f64 {
    let miss = if covered { 0.0 } else { 1.0 };
    alpha_t + gamma * (alpha_target - miss)
}

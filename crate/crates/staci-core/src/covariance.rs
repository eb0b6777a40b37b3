//! Residual covariance estimation and the blended score matrix.
//!
//! The score matrix is a convex combination of two precision matrices: the
//! inverse sample covariance of the calibration residuals and the inverse
//! topology covariance. The sample branch always carries a small relative
//! ridge so the sample-only endpoint stays runnable when the window is
//! shorter than the dimension.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative ridge applied to the sample-covariance branch before inversion.
pub const SAMPLE_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CovarianceError {
    #[error("residual window too short: need >= 2, have {0}")]
    WindowTooShort(usize),
    #[error("empty residual list")]
    EmptyInput,
    #[error("matrix not positive definite at ridge {ridge}")]
    FactorizationFailed { ridge: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("blend weight {0} outside [0, 1]")]
    InvalidLambda(f64),
}

/// Sliding window of raw (uncentered) residual vectors, most recent last.
#[derive(Debug, Clone)]
pub struct ResidualWindow {
    residuals: Vec<DVector<f64>>,
    capacity: usize,
}

impl ResidualWindow {
    pub fn new(capacity: usize) -> Self {
        Self { residuals: Vec::with_capacity(capacity + 1), capacity }
    }

    pub fn from_residuals(residuals: Vec<DVector<f64>>, capacity: usize) -> Self {
        let mut w = Self::new(capacity);
        for r in residuals {
            w.push(r);
        }
        w
    }

    /// Appends a residual, evicting the oldest once past capacity.
    pub fn push(&mut self, residual: DVector<f64>) {
        self.residuals.push(residual);
        if self.residuals.len() > self.capacity {
            self.residuals.remove(0);
        }
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn as_slice(&self) -> &[DVector<f64>] {
        &self.residuals
    }
}

/// Subtracts the window mean from every residual; the mean is returned for
/// reuse on test-time residuals.
pub fn center_residuals(raw: &[DVector<f64>]) -> Result<(Vec<DVector<f64>>, DVector<f64>), CovarianceError> {
    if raw.is_empty() {
        return Err(CovarianceError::EmptyInput);
    }
    let dim = raw[0].len();
    let mut mean = DVector::zeros(dim);
    for r in raw {
        if r.len() != dim {
            return Err(CovarianceError::DimensionMismatch(format!(
                "residual of length {} in a window of dimension {dim}",
                r.len()
            )));
        }
        mean += r;
    }
    mean /= raw.len() as f64;
    let centered = raw.iter().map(|r| r - &mean).collect();
    Ok((centered, mean))
}

/// Unbiased sample covariance (divisor n-1) of centered residuals.
pub fn sample_covariance(centered: &[DVector<f64>]) -> Result<DMatrix<f64>, CovarianceError> {
    if centered.len() < 2 {
        return Err(CovarianceError::WindowTooShort(centered.len()));
    }
    let dim = centered[0].len();
    let mut acc = DMatrix::zeros(dim, dim);
    for r in centered {
        acc += r * r.transpose();
    }
    Ok(acc / (centered.len() as f64 - 1.0))
}

/// Inverts a symmetric matrix through Cholesky after adding a relative ridge
/// `ridge * tr(M)/I` to the diagonal. With `ridge = 0` a non-PD input fails.
pub fn invert_pd(m: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>, CovarianceError> {
    if m.nrows() != m.ncols() {
        return Err(CovarianceError::DimensionMismatch(format!(
            "{}x{} matrix is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut work = m.clone();
    if ridge > 0.0 {
        let bump = ridge * m.trace() / m.nrows() as f64;
        for i in 0..work.nrows() {
            work[(i, i)] += bump;
        }
    }
    nalgebra::Cholesky::new(work)
        .map(|c| c.inverse())
        .ok_or(CovarianceError::FactorizationFailed { ridge })
}

/// Which precision sources went into a score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    SampleOnly,
    TopologyOnly,
    Blended,
    Identity,
    GroundTruth,
}

/// Symmetric positive-definite matrix defining the quadratic nonconformity
/// score and the ellipsoid shape. The determinant comes from the same
/// Cholesky factorization that verifies positive definiteness.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    matrix: DMatrix<f64>,
    lambda: f64,
    provenance: Provenance,
    det: f64,
}

impl ScoreMatrix {
    pub fn new(matrix: DMatrix<f64>, lambda: f64, provenance: Provenance) -> Result<Self, CovarianceError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CovarianceError::InvalidLambda(lambda));
        }
        let chol = nalgebra::Cholesky::new(matrix.clone())
            .ok_or(CovarianceError::FactorizationFailed { ridge: 0.0 })?;
        let det = chol.determinant();
        Ok(Self { matrix, lambda, provenance, det })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            lambda: 0.0,
            provenance: Provenance::Identity,
            det: 1.0,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn det(&self) -> f64 {
        self.det
    }

    /// Scales the matrix by a positive constant (used by the scale-invariance
    /// checks; region membership and scaled volume are unaffected).
    pub fn scaled(&self, c: f64) -> Result<Self, CovarianceError> {
        Self::new(&self.matrix * c, self.lambda, self.provenance)
    }
}

/// Builds a sample-only score matrix, ridged by [`SAMPLE_RIDGE`].
pub fn sample_only(sample_cov: &DMatrix<f64>) -> Result<ScoreMatrix, CovarianceError> {
    ScoreMatrix::new(invert_pd(sample_cov, SAMPLE_RIDGE)?, 0.0, Provenance::SampleOnly)
}

/// Forms `A = (1-lambda) * inv(sample_cov + ridge) + lambda * inv(topo_cov)`.
///
/// The endpoints short-circuit: at `lambda = 0` the topology branch is never
/// inverted (and vice versa at 1), so each endpoint degrades to exactly the
/// single-source matrix.
pub fn blend(
    sample_cov: &DMatrix<f64>,
    topo_cov: &DMatrix<f64>,
    lambda: f64,
) -> Result<ScoreMatrix, CovarianceError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CovarianceError::InvalidLambda(lambda));
    }
    if lambda == 0.0 {
        return ScoreMatrix::new(invert_pd(sample_cov, SAMPLE_RIDGE)?, 0.0, Provenance::SampleOnly);
    }
    if lambda == 1.0 {
        return ScoreMatrix::new(invert_pd(topo_cov, 0.0)?, 1.0, Provenance::TopologyOnly);
    }
    if sample_cov.shape() != topo_cov.shape() {
        return Err(CovarianceError::DimensionMismatch(format!(
            "sample {:?} vs topology {:?}",
            sample_cov.shape(),
            topo_cov.shape()
        )));
    }
    let a = invert_pd(sample_cov, SAMPLE_RIDGE)? * (1.0 - lambda) + invert_pd(topo_cov, 0.0)? * lambda;
    ScoreMatrix::new(a, lambda, Provenance::Blended)
}

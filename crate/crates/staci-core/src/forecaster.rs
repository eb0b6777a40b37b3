//! Point-prediction models: a least-squares AR baseline for synthetic data
//! and ingestion of externally produced prediction files for real data.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::io::{FileError, ObservationsFile};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("too few training rows: {rows} effective rows for {params} parameters")]
    TooFewRows { rows: usize, params: usize },
    #[error("history shape mismatch: expected {expected} rows, got {got}")]
    HistoryShape { expected: usize, got: usize },
    #[error("least-squares solve failed: {0}")]
    SolveFailed(String),
    #[error("prediction file site columns do not match the observation file (column order is the dimension contract): expected {expected:?}, got {got:?}")]
    SchemaMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("prediction file is missing timestamp {0}")]
    MissingTimestamp(u64),
    #[error("prediction file timestamps do not align with the observation file")]
    TimestampMismatch,
    #[error("non-finite prediction at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error(transparent)]
    File(#[from] FileError),
}

/// Coefficients of an autoregressive one-step-ahead model. Lag 1 comes first.
#[derive(Debug, Clone)]
enum Coeffs {
    /// One coefficient vector pooled across sites.
    Shared(DVector<f64>),
    /// One coefficient vector per site.
    PerSite(Vec<DVector<f64>>),
}

/// Fitted AR model with per-site intercepts.
#[derive(Debug, Clone)]
pub struct ARModel {
    order: usize,
    coeffs: Coeffs,
    intercepts: DVector<f64>,
}

impl ARModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.intercepts
    }

    /// The pooled coefficient vector, if the model was fit shared.
    pub fn shared_coeffs(&self) -> Option<&DVector<f64>> {
        match &self.coeffs {
            Coeffs::Shared(c) => Some(c),
            Coeffs::PerSite(_) => None,
        }
    }

    pub fn site_coeffs(&self, site: usize) -> &DVector<f64> {
        match &self.coeffs {
            Coeffs::Shared(c) => c,
            Coeffs::PerSite(cs) => &cs[site],
        }
    }
}

/// Where a prediction series came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionSource {
    InternalAr,
    ExternalFile,
}

/// Predictions aligned row-for-row with the observation matrix.
#[derive(Debug, Clone)]
pub struct PredictionSeries {
    pub predictions: DMatrix<f64>,
    pub source: PredictionSource,
}

/// Ordinary least squares of each value on its own site's previous `order`
/// values, including an intercept. See [`fit_ar_with`] for the interceptless
/// variant used when the generator is known to be zero-mean.
pub fn fit_ar(train: &DMatrix<f64>, order: usize, shared: bool) -> Result<ARModel, ForecastError> {
    fit_ar_with(train, order, shared, true)
}

/// OLS fit with explicit intercept control. `shared = true` pools every
/// site's rows into a single regression (one coefficient vector); otherwise
/// each site gets its own. Rank-deficient designs resolve to the minimum-norm
/// solution.
pub fn fit_ar_with(
    train: &DMatrix<f64>,
    order: usize,
    shared: bool,
    intercept: bool,
) -> Result<ARModel, ForecastError> {
    let t_train = train.nrows();
    let n_sites = train.ncols();
    let n_params = order + usize::from(intercept);
    if t_train < order + 2 {
        return Err(ForecastError::TooFewRows { rows: t_train.saturating_sub(order), params: n_params });
    }
    let rows_per_site = t_train - order;

    let fill = |design: &mut DMatrix<f64>, target: &mut DVector<f64>, row: usize, t: usize, i: usize| {
        for lag in 0..order {
            design[(row, lag)] = train[(t - lag - 1, i)];
        }
        if intercept {
            design[(row, order)] = 1.0;
        }
        target[row] = train[(t, i)];
    };

    if shared {
        let rows = rows_per_site * n_sites;
        if rows < n_params {
            return Err(ForecastError::TooFewRows { rows, params: n_params });
        }
        let mut design = DMatrix::zeros(rows, n_params);
        let mut target = DVector::zeros(rows);
        let mut row = 0;
        for t in order..t_train {
            for i in 0..n_sites {
                fill(&mut design, &mut target, row, t, i);
                row += 1;
            }
        }
        let beta = min_norm_solve(design, target)?;
        let coeffs = DVector::from_iterator(order, beta.iter().take(order).copied());
        let c = if intercept { beta[order] } else { 0.0 };
        Ok(ARModel {
            order,
            coeffs: Coeffs::Shared(coeffs),
            intercepts: DVector::from_element(n_sites, c),
        })
    } else {
        if rows_per_site < n_params {
            return Err(ForecastError::TooFewRows { rows: rows_per_site, params: n_params });
        }
        let mut all_coeffs = Vec::with_capacity(n_sites);
        let mut intercepts = DVector::zeros(n_sites);
        for i in 0..n_sites {
            let mut design = DMatrix::zeros(rows_per_site, n_params);
            let mut target = DVector::zeros(rows_per_site);
            for (row, t) in (order..t_train).enumerate() {
                fill(&mut design, &mut target, row, t, i);
            }
            let beta = min_norm_solve(design, target)?;
            all_coeffs.push(DVector::from_iterator(order, beta.iter().take(order).copied()));
            if intercept {
                intercepts[i] = beta[order];
            }
        }
        Ok(ARModel { order, coeffs: Coeffs::PerSite(all_coeffs), intercepts })
    }
}

/// Minimum-norm least-squares solution via SVD.
fn min_norm_solve(design: DMatrix<f64>, target: DVector<f64>) -> Result<DVector<f64>, ForecastError> {
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let eps = max_sv * f64::EPSILON * 1e3;
    svd.solve(&target, eps)
        .map(|m| m.column(0).into_owned())
        .map_err(|e| ForecastError::SolveFailed(e.to_string()))
}

/// One-step prediction from the most recent `order` rows (oldest first).
pub fn predict(model: &ARModel, history: &DMatrix<f64>) -> Result<DVector<f64>, ForecastError> {
    if history.nrows() != model.order {
        return Err(ForecastError::HistoryShape { expected: model.order, got: history.nrows() });
    }
    let n_sites = history.ncols();
    let mut out = DVector::zeros(n_sites);
    for i in 0..n_sites {
        let coeffs = model.site_coeffs(i);
        let mut y = model.intercepts[i];
        for lag in 0..model.order {
            y += coeffs[lag] * history[(model.order - 1 - lag, i)];
        }
        out[i] = y;
    }
    Ok(out)
}

/// Loads an external prediction file and validates it against the
/// observation file it must align with: identical site columns in identical
/// order, identical timestamps, finite values.
pub fn load_external_predictions(
    path: &std::path::Path,
    reference: &ObservationsFile,
) -> Result<PredictionSeries, ForecastError> {
    let file = crate::io::read_observations_csv(path)?;
    if file.site_names != reference.site_names {
        return Err(ForecastError::SchemaMismatch {
            expected: reference.site_names.clone(),
            got: file.site_names,
        });
    }
    if file.timestamps != reference.timestamps {
        for t in &reference.timestamps {
            if !file.timestamps.contains(t) {
                return Err(ForecastError::MissingTimestamp(*t));
            }
        }
        return Err(ForecastError::TimestampMismatch);
    }
    for (row, r) in file.values.row_iter().enumerate() {
        for (col, v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(ForecastError::NonFinite { row, col });
            }
        }
    }
    Ok(PredictionSeries { predictions: file.values, source: PredictionSource::ExternalFile })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Noiseless AR(2) panel: Y_t = 0.7 Y_{t-1} + 0.3 Y_{t-2}.
    fn exact_ar2(t: usize, n_sites: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(t, n_sites);
        for i in 0..n_sites {
            m[(0, i)] = 1.0 + i as f64;
            m[(1, i)] = 0.5 - i as f64 * 0.3;
        }
        for row in 2..t {
            for i in 0..n_sites {
                m[(row, i)] = 0.7 * m[(row - 1, i)] + 0.3 * m[(row - 2, i)];
            }
        }
        m
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let data = exact_ar2(60, 3);
        let model = fit_ar_with(&data, 2, true, false).unwrap();
        let c = model.shared_coeffs().unwrap();
        assert_relative_eq!(c[0], 0.7, epsilon = 1e-8);
        assert_relative_eq!(c[1], 0.3, epsilon = 1e-8);
        let per_site = fit_ar_with(&data, 2, false, false).unwrap();
        for i in 0..3 {
            assert_relative_eq!(per_site.site_coeffs(i)[0], 0.7, epsilon = 1e-8);
            assert_relative_eq!(per_site.site_coeffs(i)[1], 0.3, epsilon = 1e-8);
        }
    }

    #[test]
    fn predict_identity_lag() {
        let data = exact_ar2(30, 2);
        let mut model = fit_ar_with(&data, 1, true, false).unwrap();
        // Force theta = (1): prediction echoes the last row.
        model.coeffs = Coeffs::Shared(DVector::from_vec(vec![1.0]));
        let hist = DMatrix::from_row_slice(1, 2, &[5.0, 5.0]);
        assert_eq!(predict(&model, &hist).unwrap(), DVector::from_vec(vec![5.0, 5.0]));
    }

    #[test]
    fn zero_coefficients_return_intercept() {
        let model = ARModel {
            order: 2,
            coeffs: Coeffs::Shared(DVector::from_vec(vec![0.0, 0.0])),
            intercepts: DVector::from_vec(vec![1.5, -2.0]),
        };
        let hist = DMatrix::from_row_slice(2, 2, &[9.0, 9.0, -3.0, 4.0]);
        assert_eq!(predict(&model, &hist).unwrap(), DVector::from_vec(vec![1.5, -2.0]));
    }

    #[test]
    fn lag_order_is_most_recent_first() {
        let model = ARModel {
            order: 2,
            coeffs: Coeffs::Shared(DVector::from_vec(vec![0.7, 0.3])),
            intercepts: DVector::zeros(1),
        };
        // Rows oldest-first: 1 then 2. Lag 1 applies to the most recent row.
        let hist = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert_relative_eq!(predict(&model, &hist).unwrap()[0], 1.7, epsilon = 1e-15);
    }

    #[test]
    fn history_shape_is_checked() {
        let model = ARModel {
            order: 2,
            coeffs: Coeffs::Shared(DVector::from_vec(vec![0.5, 0.5])),
            intercepts: DVector::zeros(1),
        };
        let hist = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(predict(&model, &hist), Err(ForecastError::HistoryShape { .. })));
    }

    #[test]
    fn constant_series_gets_minimum_norm_solution() {
        let data = DMatrix::from_element(40, 2, 5.0);
        let model = fit_ar_with(&data, 2, true, true).unwrap();
        // Design rows are all (5, 5, 1); min-norm beta = a * 5 / (a . a).
        let expect = 5.0 / 51.0;
        let c = model.shared_coeffs().unwrap();
        assert_relative_eq!(c[0], 5.0 * expect, epsilon = 1e-8);
        assert_relative_eq!(c[1], 5.0 * expect, epsilon = 1e-8);
        assert_relative_eq!(model.intercepts[0], expect, epsilon = 1e-8);
        // The prediction still reproduces the constant exactly.
        let hist = DMatrix::from_element(2, 2, 5.0);
        let pred = predict(&model, &hist).unwrap();
        assert_relative_eq!(pred[0], 5.0, epsilon = 1e-8);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let data = DMatrix::zeros(3, 2);
        assert!(matches!(
            fit_ar_with(&data, 2, true, true),
            Err(ForecastError::TooFewRows { .. })
        ));
    }

    #[test]
    fn residuals_satisfy_normal_equations() {
        // Deterministic non-degenerate panel.
        let mut data = DMatrix::zeros(80, 2);
        for t in 0..80 {
            for i in 0..2 {
                data[(t, i)] = ((t * 7 + i * 3) as f64 * 0.61).sin() + 0.2 * (t as f64 * 0.13).cos();
            }
        }
        let model = fit_ar_with(&data, 2, true, true).unwrap();
        // Residual must be orthogonal to every design column.
        let mut dot_lag = [0.0; 2];
        let mut dot_one = 0.0;
        for t in 2..80 {
            for i in 0..2 {
                let pred = model.intercepts[i]
                    + model.site_coeffs(i)[0] * data[(t - 1, i)]
                    + model.site_coeffs(i)[1] * data[(t - 2, i)];
                let r = data[(t, i)] - pred;
                dot_lag[0] += r * data[(t - 1, i)];
                dot_lag[1] += r * data[(t - 2, i)];
                dot_one += r;
            }
        }
        assert!(dot_lag[0].abs() < 1e-8);
        assert!(dot_lag[1].abs() < 1e-8);
        assert!(dot_one.abs() < 1e-8);
    }

    #[test]
    fn predict_is_linear_without_intercept() {
        let model = ARModel {
            order: 2,
            coeffs: Coeffs::Shared(DVector::from_vec(vec![0.4, -0.2])),
            intercepts: DVector::zeros(2),
        };
        let h1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let h2 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 2.0, -2.0]);
        let combo = &h1 * 2.0 + &h2 * 3.0;
        let lhs = predict(&model, &combo).unwrap();
        let rhs = predict(&model, &h1).unwrap() * 2.0 + predict(&model, &h2).unwrap() * 3.0;
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
    }

    mod external {
        use super::*;
        use crate::io::{read_observations_csv, write_observations_csv};

        fn obs_file(dir: &std::path::Path, name: &str, drop_row: Option<usize>, permute: bool) -> std::path::PathBuf {
            let names: Vec<String> = if permute {
                vec!["site_2".into(), "site_1".into()]
            } else {
                vec!["site_1".into(), "site_2".into()]
            };
            let mut timestamps: Vec<u64> = (0..5).collect();
            let mut values = DMatrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
            if let Some(k) = drop_row {
                timestamps.remove(k);
                values = values.remove_row(k);
            }
            let path = dir.join(name);
            write_observations_csv(&path, &timestamps, &names, &values).unwrap();
            path
        }

        #[test]
        fn identical_file_gives_zero_residuals() {
            let dir = tempfile::tempdir().unwrap();
            let obs_path = obs_file(dir.path(), "obs.csv", None, false);
            let obs = read_observations_csv(&obs_path).unwrap();
            let series = load_external_predictions(&obs_path, &obs).unwrap();
            assert_eq!(series.predictions, obs.values);
            assert_eq!(series.source, PredictionSource::ExternalFile);
        }

        #[test]
        fn missing_timestamp_is_named() {
            let dir = tempfile::tempdir().unwrap();
            let obs = read_observations_csv(&obs_file(dir.path(), "obs.csv", None, false)).unwrap();
            let pred_path = obs_file(dir.path(), "pred.csv", Some(2), false);
            match load_external_predictions(&pred_path, &obs) {
                Err(ForecastError::MissingTimestamp(2)) => {}
                other => panic!("expected MissingTimestamp(2), got {other:?}"),
            }
        }

        #[test]
        fn permuted_site_columns_are_rejected() {
            let dir = tempfile::tempdir().unwrap();
            let obs = read_observations_csv(&obs_file(dir.path(), "obs.csv", None, false)).unwrap();
            let pred_path = obs_file(dir.path(), "pred.csv", None, true);
            assert!(matches!(
                load_external_predictions(&pred_path, &obs),
                Err(ForecastError::SchemaMismatch { .. })
            ));
        }
    }
}

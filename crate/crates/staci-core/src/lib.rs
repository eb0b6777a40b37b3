//! Topology-aware conformal prediction for multivariate forecasts on
//! directed stream networks.
//!
//! The pipeline: represent the network ([`network`]), estimate the
//! topology-induced covariance and its scaling parameters ([`tailup`]),
//! blend its precision with the sample precision of recent forecast
//! residuals ([`covariance`]), calibrate ellipsoidal prediction regions
//! with an adaptive confidence level ([`conformal`]), and evaluate coverage
//! against efficiency over baselines and hyperparameter sweeps
//! ([`harness`]). [`simgen`] provides a ground-truth generator for the
//! whole chain and [`forecaster`] the point-prediction models.

pub mod conformal;
pub mod covariance;
pub mod forecaster;
pub mod harness;
pub mod io;
pub mod network;
pub mod simgen;
pub mod tailup;

pub use conformal::{
    aci_update, build_region, conformal_quantile, contains, region_volume_scaled, score,
    CalibrationState, PredictionRegion, RegionSpec, Shape, Threshold,
};
pub use covariance::{
    blend, center_residuals, invert_pd, sample_covariance, Provenance, ResidualWindow, ScoreMatrix,
};
pub use forecaster::{fit_ar, fit_ar_with, load_external_predictions, predict, ARModel, PredictionSeries};
pub use harness::{
    compute_metrics, run_experiment, run_replicated, sweep, AggregateReport, DataSource,
    ExperimentConfig, ExperimentData, ForecastSpec, Method, MetricsReport, Mode, ResultRow,
    SweepGrid, SweepOutcome, SyntheticSpec, TraceRecord,
};
pub use network::{
    build_network, FlowRelation, Location, NetworkError, Point, Segment, Site, StreamNetwork,
};
pub use simgen::{figure1_network, simulate, true_covariance, SimConfig, SimOutput};
pub use tailup::{fit_tailup, tailup_covariance, TailUpParams, TopologyCovariance};

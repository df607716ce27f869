//! The decision rule: shrinkage covariance over calibration residuals,
//! Mahalanobis distance, Youden threshold, and the audit verdict.

pub mod covariance;
mod model;
pub mod threshold;

pub use covariance::{euclidean, fit_covariance, mahalanobis, ShrunkCovariance};
pub use model::{
    audit, calibrate, AuditScore, Calibration, CalibrationConfig, CalibrationScore, CalibrationStats, Decision,
    Metric, MonitorModel, ProjectorKind, Provenance, ResidualPopulation, MODEL_FORMAT_VERSION,
};
pub use threshold::{calibrate_threshold, ThresholdFit};

#[cfg(test)]
mod tests;

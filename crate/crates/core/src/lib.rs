//! Residual-stream faithfulness monitor for retrieval-augmented generation.
//!
//! Pooled answer-state activations are compared with projected evidence
//! embeddings through a Mahalanobis distance under a shrinkage covariance; a
//! Youden-calibrated threshold turns the distance into a verdict. The rule can
//! be quantized to fixed point and checked bit-exactly over the BN254 scalar
//! field.

pub mod cli;
pub mod error;
pub mod evalharness;
pub mod fieldsim;
pub mod linalg;
pub mod monitor;
pub mod pooling;
pub mod projector;
pub mod quantizer;
pub mod records;
pub mod synthgen;

pub use error::{Error, Result};
pub use monitor::{audit, calibrate, AuditScore, CalibrationConfig, Decision, MonitorModel};
pub use records::{ActivationRecord, ConditionLabel};

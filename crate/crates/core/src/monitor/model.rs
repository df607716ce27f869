use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::covariance::{self, fit_covariance, ShrunkCovariance};
use super::threshold::calibrate_threshold;
use crate::error::{Error, Result};
use crate::pooling::{self, build_idf, IdfTable, PoolingConfig};
use crate::projector::{fit_pca_align, fit_ridge_with, AffineProjector, RidgeOptions};
use crate::records::{corpus_hash, ActivationRecord};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Faithful,
    Risky,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditScore {
    pub distance: f64,
    pub decision: Decision,
}

/// Which calibration residuals feed the covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPopulation {
    #[default]
    FaithfulOnly,
    AllConditions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectorKind {
    Ridge(RidgeOptions),
    PcaAlign { rank: usize },
}

impl Default for ProjectorKind {
    fn default() -> Self {
        ProjectorKind::Ridge(RidgeOptions::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub pooling: PoolingConfig,
    pub projector: ProjectorKind,
    pub residuals: ResidualPopulation,
    /// Faithful residuals are computed out-of-fold over this many folds so the
    /// covariance and threshold see held-out projection error. `<= 1` uses
    /// in-sample residuals.
    pub cross_fit_folds: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingConfig::default(),
            projector: ProjectorKind::default(),
            residuals: ResidualPopulation::FaithfulOnly,
            cross_fit_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the calibration records in corpus order.
    pub calibration_hash: String,
    pub n_calibration: usize,
    pub n_faithful: usize,
    pub config: CalibrationConfig,
}

/// Statistics of the calibration vectors needed later by the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    /// 99.9th percentile of |coordinate| over calibration answer and evidence states.
    pub coord_p999: f64,
    /// Largest `||v_act - v_doc||_inf` over faithful calibration residuals.
    pub max_residual_inf: f64,
    pub youden_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorModel {
    pub format_version: u32,
    pub layer_index: i64,
    pub pooling: PoolingConfig,
    pub idf: IdfTable,
    pub projector: AffineProjector,
    pub covariance: ShrunkCovariance,
    /// Threshold on the distance (not its square).
    pub tau_star: f64,
    pub stats: CalibrationStats,
    pub provenance: Provenance,
}

/// Per-record calibration score the threshold was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScore {
    pub id: String,
    pub distance: f64,
    pub faithful: bool,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: MonitorModel,
    pub scores: Vec<CalibrationScore>,
}

fn fit_projector(kind: &ProjectorKind, pairs: &[(&[f64], &[f64])]) -> Result<AffineProjector> {
    match kind {
        ProjectorKind::Ridge(opts) => fit_ridge_with(pairs, opts),
        ProjectorKind::PcaAlign { rank } => fit_pca_align(pairs, *rank),
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Fits the monitor on the calibration records.
///
/// Pipeline: idf over calibration answers, pooling, projector on faithful
/// pairs, faithful residuals (out-of-fold), shrinkage covariance, and the
/// Youden threshold over faithful vs. all other conditions.
pub fn calibrate(records: &[&ActivationRecord], cfg: &CalibrationConfig) -> Result<Calibration> {
    cfg.pooling.validate()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Calibration("empty calibration set".into()))?;
    let layer_index = first.layer_index;
    if let Some(r) = records.iter().find(|r| r.layer_index != layer_index) {
        return Err(Error::Schema(format!(
            "record {} is from layer {}, calibration set uses layer {layer_index}",
            r.id, r.layer_index
        )));
    }
    let n_faithful = records.iter().filter(|r| r.condition.is_faithful()).count();
    if n_faithful == 0 || n_faithful == records.len() {
        return Err(Error::Calibration(
            "calibration needs faithful records and at least one other condition".into(),
        ));
    }
    if n_faithful < 2 {
        return Err(Error::Calibration("calibration needs at least 2 faithful records".into()));
    }

    let docs: Vec<&[String]> = records
        .iter()
        .filter(|r| !r.answer_tokens.is_empty())
        .map(|r| r.answer_tokens.as_slice())
        .collect();
    let idf = if docs.is_empty() {
        IdfTable {
            idf: Default::default(),
            corpus_size: 0,
        }
    } else {
        build_idf(docs)?
    };

    let pooled: Vec<Vec<f64>> = records
        .iter()
        .map(|r| pooling::pool(r, &idf, &cfg.pooling))
        .collect::<Result<_>>()?;
    let faithful_idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].condition.is_faithful()).collect();
    let pairs_for = |idx: &[usize]| -> Vec<(&[f64], &[f64])> {
        idx.iter()
            .map(|&i| (records[i].evidence_embedding.as_slice(), pooled[i].as_slice()))
            .collect()
    };
    let projector = fit_projector(&cfg.projector, &pairs_for(&faithful_idx))?;

    // residual for every calibration record; faithful ones out-of-fold
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); records.len()];
    let folds = cfg.cross_fit_folds.min(n_faithful / 2);
    if folds >= 2 {
        for fold in 0..folds {
            let (held, train): (Vec<(usize, usize)>, Vec<(usize, usize)>) = faithful_idx
                .iter()
                .copied()
                .enumerate()
                .partition(|(pos, _)| pos % folds == fold);
            let held: Vec<usize> = held.into_iter().map(|(_, i)| i).collect();
            let train: Vec<usize> = train.into_iter().map(|(_, i)| i).collect();
            let fold_proj = fit_projector(&cfg.projector, &pairs_for(&train))?;
            for i in held {
                let v_doc = fold_proj.project(&records[i].evidence_embedding)?;
                residuals[i] = diff(&pooled[i], v_doc.as_slice());
            }
        }
    }
    let mut coords: Vec<f64> = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let v_doc = projector.project(&rec.evidence_embedding)?;
        coords.extend(pooled[i].iter().chain(v_doc.iter()).map(|x| x.abs()));
        if residuals[i].is_empty() {
            residuals[i] = diff(&pooled[i], v_doc.as_slice());
        }
    }

    let cov_rows: Vec<&[f64]> = match cfg.residuals {
        ResidualPopulation::FaithfulOnly => faithful_idx.iter().map(|&i| residuals[i].as_slice()).collect(),
        ResidualPopulation::AllConditions => residuals.iter().map(Vec::as_slice).collect(),
    };
    let covariance = fit_covariance(&cov_rows)?;

    let scores: Vec<CalibrationScore> = records
        .iter()
        .zip(&residuals)
        .map(|(rec, res)| CalibrationScore {
            id: rec.id.clone(),
            distance: covariance.quad_form(res).max(0.0).sqrt(),
            faithful: rec.condition.is_faithful(),
        })
        .collect();
    let labelled: Vec<(f64, bool)> = scores.iter().map(|s| (s.distance, !s.faithful)).collect();
    let fit = calibrate_threshold(&labelled)?;
    if !(fit.tau.is_finite() && fit.tau > 0.0) {
        return Err(Error::Calibration(format!(
            "degenerate threshold {} (Youden J = {}): classes are not separable by distance",
            fit.tau, fit.youden_j
        )));
    }

    coords.sort_by(f64::total_cmp);
    let rank = ((0.999 * coords.len() as f64).ceil() as usize).clamp(1, coords.len());
    let stats = CalibrationStats {
        coord_p999: coords[rank - 1],
        max_residual_inf: faithful_idx.iter().map(|&i| inf_norm(&residuals[i])).fold(0.0, f64::max),
        youden_j: fit.youden_j,
    };

    let model = MonitorModel {
        format_version: MODEL_FORMAT_VERSION,
        layer_index,
        pooling: cfg.pooling,
        idf,
        projector,
        covariance,
        tau_star: fit.tau,
        stats,
        provenance: Provenance {
            calibration_hash: corpus_hash(records.iter().copied()),
            n_calibration: records.len(),
            n_faithful,
            config: *cfg,
        },
    };
    model.validate()?;
    Ok(Calibration { model, scores })
}

/// Distance used to score a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mahalanobis,
    Euclidean,
}

impl MonitorModel {
    pub fn hidden_dim(&self) -> usize {
        self.covariance.dim
    }

    pub fn evidence_dim(&self) -> usize {
        self.projector.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_star.is_finite() && self.tau_star > 0.0) {
            return Err(Error::Schema(format!("tau_star must be finite and positive, got {}", self.tau_star)));
        }
        if self.projector.output_dim() != self.covariance.dim {
            return Err(Error::Schema(format!(
                "projector outputs dimension {}, covariance has {}",
                self.projector.output_dim(),
                self.covariance.dim
            )));
        }
        if self.covariance.basis.nrows() != self.covariance.dim
            || self.covariance.basis.ncols() != self.covariance.excess.len()
        {
            return Err(Error::Schema("covariance basis shape is inconsistent".into()));
        }
        if self.covariance.lambda_min() <= 0.0 {
            return Err(Error::Schema("covariance is not positive definite".into()));
        }
        Ok(())
    }

    fn check_record(&self, rec: &ActivationRecord) -> Result<()> {
        if rec.pooled_override.is_none() && rec.answer_activations.is_empty() {
            return Err(Error::EmptyAnswer { id: rec.id.clone() });
        }
        if rec.hidden_dim() != self.hidden_dim() || rec.evidence_dim() != self.evidence_dim() {
            return Err(Error::Argument(format!(
                "record {} has dimensions (d={}, m={}), model expects (d={}, m={})",
                rec.id,
                rec.hidden_dim(),
                rec.evidence_dim(),
                self.hidden_dim(),
                self.evidence_dim()
            )));
        }
        if rec.layer_index != self.layer_index {
            return Err(Error::Argument(format!(
                "record {} is from layer {}, model was calibrated on layer {}",
                rec.id, rec.layer_index, self.layer_index
            )));
        }
        Ok(())
    }

    /// `(v_act, v_doc)` for a record.
    pub fn states(&self, rec: &ActivationRecord) -> Result<(Vec<f64>, DVector<f64>)> {
        self.check_record(rec)?;
        let v_act = pooling::pool(rec, &self.idf, &self.pooling)?;
        let v_doc = self.projector.project(&rec.evidence_embedding)?;
        Ok((v_act, v_doc))
    }

    pub fn distance(&self, rec: &ActivationRecord, metric: Metric) -> Result<f64> {
        let (v_act, v_doc) = self.states(rec)?;
        Ok(match metric {
            Metric::Mahalanobis => covariance::mahalanobis(&self.covariance, &v_act, v_doc.as_slice())?,
            Metric::Euclidean => covariance::euclidean(&v_act, v_doc.as_slice()),
        })
    }

    pub fn decide(&self, distance: f64) -> Decision {
        if distance > self.tau_star {
            Decision::Risky
        } else {
            Decision::Faithful
        }
    }

    pub fn audit(&self, rec: &ActivationRecord) -> Result<AuditScore> {
        let distance = self.distance(rec, Metric::Mahalanobis)?;
        Ok(AuditScore {
            distance,
            decision: self.decide(distance),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let model: MonitorModel = serde_json::from_reader(BufReader::new(file))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn audit(model: &MonitorModel, record: &ActivationRecord) -> Result<AuditScore> {
    model.audit(record)
}

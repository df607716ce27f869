use super::*;
use crate::error::Error;
use crate::records::{ActivationRecord, ConditionLabel};
use crate::synthgen::{generate, SynthConfig};

fn corpus() -> Vec<ActivationRecord> {
    generate(&SynthConfig {
        n_seeds: 60,
        seed: 11,
        ..SynthConfig::with_dims(8, 4)
    })
    .unwrap()
}

fn fitted() -> (MonitorModel, Vec<ActivationRecord>) {
    let recs = corpus();
    let refs: Vec<&ActivationRecord> = recs.iter().collect();
    let model = calibrate(&refs, &CalibrationConfig::default()).unwrap().model;
    (model, recs)
}

fn with_override(rec: &ActivationRecord, v: Vec<f64>) -> ActivationRecord {
    ActivationRecord {
        pooled_override: Some(v),
        ..rec.clone()
    }
}

#[test]
fn exact_projection_is_faithful_with_zero_distance() {
    let (model, recs) = fitted();
    let v_doc = model.projector.project(&recs[0].evidence_embedding).unwrap();
    let rec = with_override(&recs[0], v_doc.as_slice().to_vec());
    let score = audit(&model, &rec).unwrap();
    assert_eq!(score.distance, 0.0);
    assert_eq!(score.decision, Decision::Faithful);
}

#[test]
fn threshold_is_strict() {
    let (model, _) = fitted();
    assert_eq!(model.decide(model.tau_star), Decision::Faithful);
    assert_eq!(model.decide(model.tau_star.next_up()), Decision::Risky);
}

#[test]
fn shift_along_rarest_fitted_axis_is_risky() {
    let (model, recs) = fitted();
    let cov = &model.covariance;
    let d = cov.dim;
    // eigenvector of the smallest eigenvalue of the fitted covariance
    let eig = nalgebra::SymmetricEigen::new(cov.sigma());
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, &l)| if l < b.1 { (i, l) } else { b });
    let u = eig.eigenvectors.column(imin);
    let v_doc = model.projector.project(&recs[0].evidence_embedding).unwrap();
    let sigma = lmin.sqrt();
    // at least 6σ, and past the threshold whatever it is
    let shift = sigma * 6f64.max(2.0 * model.tau_star);
    let v: Vec<f64> = (0..d).map(|i| v_doc[i] + shift * u[i]).collect();
    let score = audit(&model, &with_override(&recs[0], v)).unwrap();
    assert!((score.distance - shift / sigma).abs() < 1e-6 * score.distance);
    assert_eq!(score.decision, Decision::Risky);
}

#[test]
fn calibration_needs_both_classes() {
    let recs = corpus();
    let faithful: Vec<&ActivationRecord> = recs.iter().filter(|r| r.condition.is_faithful()).collect();
    assert!(matches!(
        calibrate(&faithful, &CalibrationConfig::default()),
        Err(Error::Calibration(_))
    ));
    let one: Vec<&ActivationRecord> = recs
        .iter()
        .filter(|r| r.condition == ConditionLabel::Contradicted)
        .chain(recs.iter().filter(|r| r.condition.is_faithful()).take(1))
        .collect();
    assert!(matches!(calibrate(&one, &CalibrationConfig::default()), Err(Error::Calibration(_))));
    assert!(matches!(calibrate(&[], &CalibrationConfig::default()), Err(Error::Calibration(_))));
}

#[test]
fn calibration_is_deterministic_and_threshold_positive() {
    let recs = corpus();
    let refs: Vec<&ActivationRecord> = recs.iter().collect();
    let a = calibrate(&refs, &CalibrationConfig::default()).unwrap();
    let b = calibrate(&refs, &CalibrationConfig::default()).unwrap();
    assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
    assert!(a.model.tau_star.is_finite() && a.model.tau_star > 0.0);
    assert_eq!(a.scores.len(), recs.len());
    assert_eq!(a.model.provenance.n_faithful, 60);
}

#[test]
fn audit_is_order_invariant() {
    let (model, recs) = fitted();
    let forward: Vec<(String, AuditScore)> = recs.iter().map(|r| (r.id.clone(), audit(&model, r).unwrap())).collect();
    let mut backward: Vec<(String, AuditScore)> =
        recs.iter().rev().map(|r| (r.id.clone(), audit(&model, r).unwrap())).collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

#[test]
fn mismatched_records_are_rejected() {
    let (model, recs) = fitted();
    let mut r = recs[0].clone();
    r.layer_index = 3;
    assert!(matches!(audit(&model, &r), Err(Error::Argument(_))));
    let r = with_override(&recs[0], vec![0.0; 5]);
    assert!(matches!(audit(&model, &r), Err(Error::Argument(_))));
    let mut r = recs[0].clone();
    r.answer_tokens.clear();
    r.answer_activations.clear();
    assert!(matches!(audit(&model, &r), Err(Error::EmptyAnswer { .. })));
}

#[test]
fn save_load_round_trip() {
    let (model, recs) = fitted();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let back = MonitorModel::load(&path).unwrap();
    assert_eq!(back, model);
    for r in &recs[..8] {
        assert_eq!(audit(&back, r).unwrap(), audit(&model, r).unwrap());
    }
    let mut bad = model.clone();
    bad.format_version = 99;
    bad.save(&path).unwrap();
    assert!(matches!(MonitorModel::load(&path), Err(Error::Schema(_))));
}

#[test]
fn all_condition_residuals_option() {
    let recs = corpus();
    let refs: Vec<&ActivationRecord> = recs.iter().collect();
    let cfg = CalibrationConfig {
        residuals: ResidualPopulation::AllConditions,
        ..CalibrationConfig::default()
    };
    let m = calibrate(&refs, &cfg).unwrap().model;
    assert_eq!(m.covariance.n_samples, recs.len());
}

#[test]
fn pca_projector_option() {
    let recs = corpus();
    let refs: Vec<&ActivationRecord> = recs.iter().collect();
    let cfg = CalibrationConfig {
        projector: ProjectorKind::PcaAlign { rank: 4 },
        ..CalibrationConfig::default()
    };
    let m = calibrate(&refs, &cfg).unwrap().model;
    assert!(m.projector.standardization.is_none());
    assert_eq!(m.evidence_dim(), 4);
}

//! Metrics and experiment drivers: stress evaluation, bootstrap stability of
//! the threshold, OOD transfer, and report emission.

mod metrics;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{auprc, auroc, auroc_stderr, f1_at};

use crate::error::{Error, Result};
use crate::fieldsim::AgreementReport;
use crate::monitor::{calibrate, calibrate_threshold, CalibrationConfig, MonitorModel};
use crate::records::{stratified_split, ActivationRecord, ConditionLabel};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub n_eval: usize,
    pub counts: BTreeMap<String, usize>,
    pub auroc: f64,
    pub auroc_stderr: f64,
    pub auprc: f64,
    pub f1: f64,
    pub tau_star: f64,
    /// Faithful vs. each other condition present, keyed `F/C`, `F/RM`, `F/P`.
    pub pairwise: BTreeMap<String, f64>,
    pub pairwise_stderr: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agreement: Vec<AgreementReport>,
    /// Echo of the configuration that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn tau_sigma(&self) -> Option<f64> {
        self.bootstrap.as_ref().map(|b| b.tau_sigma)
    }

    pub fn f1_sigma(&self) -> Option<f64> {
        self.bootstrap.as_ref().map(|b| b.f1_sigma)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat table with columns `metric,condition_pair,value,stderr,n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "metric,condition_pair,value,stderr,n")?;
        let n_flagged = self.n_eval - self.counts.get("faithful").copied().unwrap_or(0);
        writeln!(out, "auroc,all,{},{},{}", self.auroc, self.auroc_stderr, self.n_eval)?;
        writeln!(out, "auprc,all,{},,{}", self.auprc, self.n_eval)?;
        let f1_se = self.f1_sigma().map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "f1,all,{},{f1_se},{}", self.f1, self.n_eval)?;
        let tau_se = self.tau_sigma().map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "tau_star,all,{},{tau_se},{}", self.tau_star, n_flagged)?;
        for (pair, v) in &self.pairwise {
            let cond = self.pair_size(pair);
            writeln!(out, "auroc,{pair},{v},{},{cond}", self.pairwise_stderr[pair])?;
        }
        for a in &self.agreement {
            writeln!(out, "agreement,k={},{},,{}", a.frac_bits, a.agreement_rate, a.n_records)?;
            if let Some(m) = a.auroc_match {
                writeln!(out, "auroc_match,k={},{m},,{}", a.frac_bits, a.n_records)?;
            }
        }
        Ok(())
    }

    fn pair_size(&self, pair: &str) -> usize {
        let faithful = self.counts.get("faithful").copied().unwrap_or(0);
        ConditionLabel::ALL
            .iter()
            .find(|c| format!("F/{}", c.short()) == pair)
            .map(|c| faithful + self.counts.get(c.as_str()).copied().unwrap_or(0))
            .unwrap_or(0)
    }
}

/// Scores every record; `positive` marks non-faithful conditions.
pub fn score_records(model: &MonitorModel, records: &[&ActivationRecord]) -> Result<Vec<(f64, bool)>> {
    records
        .iter()
        .map(|r| Ok((model.audit(r)?.distance, !r.condition.is_faithful())))
        .collect()
}

/// Overall metrics with all non-faithful conditions as one class, plus
/// faithful-vs-condition AUROCs.
pub fn stress_eval(model: &MonitorModel, records: &[&ActivationRecord]) -> Result<EvalReport> {
    let scores = score_records(model, records)?;
    let labels: Vec<ConditionLabel> = records.iter().map(|r| r.condition).collect();
    report_from_scores(&scores, &labels, model.tau_star)
}

/// [`stress_eval`] on precomputed scores.
pub fn report_from_scores(scores: &[(f64, bool)], labels: &[ConditionLabel], tau_star: f64) -> Result<EvalReport> {
    let mut counts = BTreeMap::new();
    for c in labels {
        *counts.entry(c.as_str().to_string()).or_insert(0usize) += 1;
    }
    let n_faithful = counts.get("faithful").copied().unwrap_or(0);
    if n_faithful == 0 {
        return Err(Error::Evaluation("evaluation corpus has no faithful records".into()));
    }
    if n_faithful == scores.len() {
        return Err(Error::Evaluation("evaluation corpus has no non-faithful records".into()));
    }
    let overall = auroc(scores)?;
    let mut pairwise = BTreeMap::new();
    let mut pairwise_stderr = BTreeMap::new();
    for cond in ConditionLabel::ALL.iter().filter(|c| !c.is_faithful()) {
        let subset: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.is_faithful() || *l == cond)
            .map(|(s, _)| *s)
            .collect();
        let n_cond = subset.iter().filter(|s| s.1).count();
        if n_cond == 0 {
            continue;
        }
        let a = auroc(&subset)?;
        let key = format!("F/{}", cond.short());
        pairwise_stderr.insert(key.clone(), auroc_stderr(a, n_cond, n_faithful));
        pairwise.insert(key, a);
    }
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        n_eval: scores.len(),
        counts,
        auroc: overall,
        auroc_stderr: auroc_stderr(overall, scores.len() - n_faithful, n_faithful),
        auprc: auprc(scores)?,
        f1: f1_at(tau_star, scores)?,
        tau_star,
        pairwise,
        pairwise_stderr,
        bootstrap: None,
        agreement: Vec::new(),
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub n_resamples: usize,
    pub seed: u64,
    /// Resamples whose refit threshold was degenerate (not finite).
    pub n_skipped: usize,
    pub tau_sigma: f64,
    pub f1_sigma: f64,
    pub taus: Vec<f64>,
    pub f1s: Vec<f64>,
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Refits the Youden threshold on stratified resamples (with replacement,
/// class sizes preserved) of the calibration scores and evaluates F1 on the
/// evaluation scores at every refit threshold.
///
/// Resample `i` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `i`:
/// first the positive-class indices, then the negative-class indices, each
/// via `random_range(0..class_size)` in calibration order.
pub fn bootstrap_stability(
    calibration: &[(f64, bool)],
    evaluation: &[(f64, bool)],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if n_resamples < 2 {
        return Err(Error::Argument(format!("n_resamples must be at least 2, got {n_resamples}")));
    }
    let pos: Vec<f64> = calibration.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = calibration.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Calibration("bootstrap needs both classes in the calibration scores".into()));
    }
    let mut taus = Vec::with_capacity(n_resamples);
    let mut f1s = Vec::with_capacity(n_resamples);
    let mut n_skipped = 0;
    let mut sample = Vec::with_capacity(calibration.len());
    for i in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sample.clear();
        sample.extend((0..pos.len()).map(|_| (pos[rng.random_range(0..pos.len())], true)));
        sample.extend((0..neg.len()).map(|_| (neg[rng.random_range(0..neg.len())], false)));
        let fit = calibrate_threshold(&sample)?;
        if !fit.tau.is_finite() {
            n_skipped += 1;
            continue;
        }
        taus.push(fit.tau);
        f1s.push(f1_at(fit.tau, evaluation)?);
    }
    Ok(BootstrapResult {
        n_resamples,
        seed,
        n_skipped,
        tau_sigma: sample_std(&taus),
        f1_sigma: sample_std(&f1s),
        taus,
        f1s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub n_eval: usize,
    pub in_domain_auroc: f64,
    pub ood_auroc: f64,
    pub in_domain_f1: f64,
    pub ood_f1: f64,
    pub in_domain_tau: f64,
    pub ood_tau: f64,
    /// Fraction of records where both models reach the same decision.
    pub decision_agreement: f64,
}

/// Evaluates domain-B records twice: with B's own model and with B's
/// pooling and projector combined with A's covariance and threshold.
pub fn ood_transfer(model_a: &MonitorModel, model_b: &MonitorModel, eval_b: &[&ActivationRecord]) -> Result<OodReport> {
    if model_a.hidden_dim() != model_b.hidden_dim() {
        return Err(Error::Argument(format!(
            "model A has hidden dimension {}, domain B has {}",
            model_a.hidden_dim(),
            model_b.hidden_dim()
        )));
    }
    let mut transferred = model_b.clone();
    transferred.covariance = model_a.covariance.clone();
    transferred.tau_star = model_a.tau_star;

    let own = score_records(model_b, eval_b)?;
    let cross = score_records(&transferred, eval_b)?;
    let agree = own
        .iter()
        .zip(&cross)
        .filter(|(o, c)| model_b.decide(o.0) == transferred.decide(c.0))
        .count();
    Ok(OodReport {
        n_eval: eval_b.len(),
        in_domain_auroc: auroc(&own)?,
        ood_auroc: auroc(&cross)?,
        in_domain_f1: f1_at(model_b.tau_star, &own)?,
        ood_f1: f1_at(transferred.tau_star, &cross)?,
        in_domain_tau: model_b.tau_star,
        ood_tau: transferred.tau_star,
        decision_agreement: agree as f64 / eval_b.len().max(1) as f64,
    })
}

/// Splits corpus B, calibrates B's own model, and runs [`ood_transfer`].
pub fn ood_transfer_corpus(
    model_a: &MonitorModel,
    corpus_b: &[ActivationRecord],
    calibration_fraction: f64,
    seed: u64,
    cfg: &CalibrationConfig,
) -> Result<OodReport> {
    if let Some(r) = corpus_b.first() {
        if r.hidden_dim() != model_a.hidden_dim() {
            return Err(Error::Argument(format!(
                "model A has hidden dimension {}, corpus B has {}",
                model_a.hidden_dim(),
                r.hidden_dim()
            )));
        }
    }
    let split = stratified_split(corpus_b, calibration_fraction, seed)?;
    let (calib, eval) = split.partition(corpus_b)?;
    let model_b = calibrate(&calib, cfg)?.model;
    ood_transfer(model_a, &model_b, &eval)
}

use serde::{Deserialize, Serialize};

use super::circuit::{check_constraints, Verdict};
use crate::error::{Error, Result};
use crate::evalharness::auroc;
use crate::monitor::{Decision, MonitorModel};
use crate::quantizer::{QuantConfig, QuantizedRule, ThresholdMode};
use crate::records::ActivationRecord;

/// FP rule vs. the quantized constraint check on the same records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub frac_bits: u32,
    pub threshold_mode: ThresholdMode,
    pub n_records: usize,
    pub n_agree: usize,
    pub agreement_rate: f64,
    /// Records whose inputs exceeded the clip (flagged Risky).
    pub n_clipped: usize,
    pub n_range_violations: usize,
    pub fp_auroc: Option<f64>,
    pub quant_auroc: Option<f64>,
    /// `quant_auroc / fp_auroc`.
    pub auroc_match: Option<f64>,
}

/// Per-record outcome of the quantized check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedAudit {
    pub decision: Decision,
    /// Signed form divided by `2^{3k}`; `+inf` when the record never reached
    /// the comparison.
    pub score: f64,
    pub clipped: bool,
    pub range_violation: bool,
}

/// Runs the quantized check for one record. Inputs outside the clip are
/// flagged Risky (fail-closed) instead of saturating.
pub fn quantized_audit(model: &MonitorModel, rule: &QuantizedRule, rec: &ActivationRecord) -> Result<QuantizedAudit> {
    let (v_act, v_doc) = model.states(rec)?;
    let w = match rule.witness(&v_act, v_doc.as_slice()) {
        Ok(w) => w,
        Err(Error::Range(_)) => {
            return Ok(QuantizedAudit {
                decision: Decision::Risky,
                score: f64::INFINITY,
                clipped: true,
                range_violation: false,
            })
        }
        Err(e) => return Err(e),
    };
    let r = check_constraints(&w)?;
    let scale = 2f64.powi(3 * rule.cfg.frac_bits as i32);
    Ok(match r.verdict {
        Verdict::RangeViolation => QuantizedAudit {
            decision: Decision::Risky,
            score: f64::INFINITY,
            clipped: false,
            range_violation: true,
        },
        v => {
            let (neg, mag) = r.form_signed();
            let value = mag.to_f64() / scale;
            QuantizedAudit {
                decision: if v == Verdict::Pass { Decision::Faithful } else { Decision::Risky },
                score: if neg { -value } else { value },
                clipped: false,
                range_violation: false,
            }
        }
    })
}

pub fn fp_field_agreement(model: &MonitorModel, records: &[&ActivationRecord], cfg: &QuantConfig) -> Result<AgreementReport> {
    fp_field_agreement_with(model, records, cfg, ThresholdMode::Exact)
}

pub fn fp_field_agreement_with(
    model: &MonitorModel,
    records: &[&ActivationRecord],
    cfg: &QuantConfig,
    mode: ThresholdMode,
) -> Result<AgreementReport> {
    if records.is_empty() {
        return Err(Error::Evaluation("agreement needs at least one record".into()));
    }
    let rule = QuantizedRule::new(model, cfg, mode)?;
    let mut fp_scores = Vec::with_capacity(records.len());
    let mut q_scores = Vec::with_capacity(records.len());
    let (mut n_agree, mut n_clipped, mut n_range) = (0, 0, 0);
    for rec in records {
        let fp = model.audit(rec)?;
        let q = quantized_audit(model, &rule, rec)?;
        n_agree += usize::from(fp.decision == q.decision);
        n_clipped += usize::from(q.clipped);
        n_range += usize::from(q.range_violation);
        let flagged = !rec.condition.is_faithful();
        fp_scores.push((fp.distance, flagged));
        q_scores.push((q.score, flagged));
    }
    let both_classes = fp_scores.iter().any(|s| s.1) && fp_scores.iter().any(|s| !s.1);
    let (fp_auroc, quant_auroc) = if both_classes {
        (Some(auroc(&fp_scores)?), Some(auroc(&q_scores)?))
    } else {
        (None, None)
    };
    Ok(AgreementReport {
        frac_bits: cfg.frac_bits,
        threshold_mode: mode,
        n_records: records.len(),
        n_agree,
        agreement_rate: n_agree as f64 / records.len() as f64,
        n_clipped,
        n_range_violations: n_range,
        fp_auroc,
        quant_auroc,
        auroc_match: fp_auroc.zip(quant_auroc).map(|(f, q)| q / f),
    })
}

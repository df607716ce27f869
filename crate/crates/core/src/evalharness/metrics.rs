//! Detection metrics. Scores are `(score, positive)` pairs where `positive`
//! marks the class expected to score high (the flagged side).

use crate::error::{Error, Result};

fn class_counts(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "metric needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

fn sorted_ascending(scores: &[(f64, bool)]) -> Vec<(f64, bool)> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Mann-Whitney AUROC: `P(neg < pos) + P(tie) / 2`, exact.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    let (pos, neg) = class_counts(scores)?;
    let sorted = sorted_ascending(scores);
    // twice the rank sum of positives, using mid-ranks for ties (integers)
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j, twice their mean is i + j + 1
        let n_pos = sorted[i..j].iter().filter(|s| s.1).count() as u128;
        rank2_sum += n_pos * (i + j + 1) as u128;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    // one correctly rounded division of exact integers
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Hanley-McNeil standard error of an AUROC estimate.
pub fn auroc_stderr(a: f64, n_pos: usize, n_neg: usize) -> f64 {
    let (p, n) = (n_pos as f64, n_neg as f64);
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let var = (a * (1.0 - a) + (p - 1.0) * (q1 - a * a) + (n - 1.0) * (q2 - a * a)) / (p * n);
    var.max(0.0).sqrt()
}

/// Average precision: `Σ (R_k - R_{k-1}) P_k` over descending distinct
/// thresholds, without interpolation.
pub fn auprc(scores: &[(f64, bool)]) -> Result<f64> {
    let (pos, _) = class_counts(scores)?;
    let mut sorted = sorted_ascending(scores);
    sorted.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// F1 of the rule `score > threshold` for the positive class.
pub fn f1_at(threshold: f64, scores: &[(f64, bool)]) -> Result<f64> {
    class_counts(scores)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(s, positive) in scores {
        match (s > threshold, positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

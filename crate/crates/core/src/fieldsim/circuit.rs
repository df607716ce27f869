//! The two audit constraints over F_p:
//!
//! ```text
//! x̂ = v̂_act - v̂_doc
//! x̂ᵀ Σ̂⁻¹ x̂ ≤ τ̂²
//! ```
//!
//! `≤` has no meaning in F_p by itself, so range gates bound every input and a
//! static check proves the form cannot wrap. Only then is the reduced value
//! decoded as a signed integer and compared.

use serde::{Deserialize, Serialize};

use super::field::{FieldElement, MODULUS};
use super::u256::U256;
use crate::error::{Error, Result};
use crate::quantizer::QuantizedWitness;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Reject,
    /// A range gate failed; the form was not compared.
    RangeViolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResult {
    pub x_hat: Vec<FieldElement>,
    pub form_value: FieldElement,
    pub bound: FieldElement,
    pub range_ok: bool,
    pub verdict: Verdict,
}

impl ConstraintResult {
    /// `None` when the range gates failed.
    pub fn passed(&self) -> Option<bool> {
        match self.verdict {
            Verdict::Pass => Some(true),
            Verdict::Reject => Some(false),
            Verdict::RangeViolation => None,
        }
    }

    /// The form as a signed integer `(negative, magnitude)`; meaningful only
    /// when `range_ok`.
    pub fn form_signed(&self) -> (bool, U256) {
        self.form_value.to_signed()
    }
}

/// `2 d² X² S < p`: the quadratic form of any inputs within the gates lies in
/// `(-(p-1)/2, (p-1)/2]`, so the reduced value decodes to the true integer.
pub fn static_range_ok(d: usize, diff_bound: u128, matrix_bound: u128) -> bool {
    let prod = [
        U256::from_u64(2),
        U256::from_u128((d as u128) * (d as u128)),
        U256::from_u128(diff_bound),
        U256::from_u128(diff_bound),
        U256::from_u128(matrix_bound),
    ]
    .iter()
    .try_fold(U256::ONE, |acc, v| acc.checked_mul(v));
    matches!(prod, Some(v) if v < MODULUS)
}

fn check_shapes(w: &QuantizedWitness) -> Result<()> {
    let d = w.v_act_q.len();
    if w.v_doc_q.len() != d || w.sigma_inv_q.dim() != d {
        return Err(Error::Schema(format!(
            "inconsistent witness shapes: v_act {}, v_doc {}, matrix {}x{} ({} entries)",
            d,
            w.v_doc_q.len(),
            w.sigma_inv_q.dim(),
            w.sigma_inv_q.dim(),
            w.sigma_inv_q.data().len()
        )));
    }
    Ok(())
}

fn differences(w: &QuantizedWitness) -> Vec<i128> {
    w.v_act_q
        .iter()
        .zip(&w.v_doc_q)
        .map(|(&a, &b)| a as i128 - b as i128)
        .collect()
}

/// Reference evaluation: every product and sum reduced in the field.
pub fn evaluate_form_field(w: &QuantizedWitness) -> Result<FieldElement> {
    check_shapes(w)?;
    let x: Vec<FieldElement> = differences(w).into_iter().map(FieldElement::from_i128).collect();
    let mut acc = FieldElement::ZERO;
    for (i, xi) in x.iter().enumerate() {
        let mut row = FieldElement::ZERO;
        for (s, xj) in w.sigma_inv_q.row(i).iter().zip(&x) {
            row = row + FieldElement::from_i64(*s) * *xj;
        }
        acc = acc + *xi * row;
    }
    Ok(acc)
}

/// Same value as [`evaluate_form_field`]. Inner products `t = Σ̂⁻¹ x̂` run in
/// machine integers when their magnitude provably fits, and only the outer
/// sum is reduced mod p.
pub fn evaluate_form(w: &QuantizedWitness) -> Result<FieldElement> {
    check_shapes(w)?;
    let d = w.dim();
    let x = differences(w);
    let max_x = x.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    let max_s = w.sigma_inv_q.max_abs() as u128;
    let row_bound = (d as u128).checked_mul(max_x).and_then(|v| v.checked_mul(max_s));

    let t: Vec<i128> = match row_bound {
        Some(b) if b < (1u128 << 63) => {
            let x64: Vec<i64> = x.iter().map(|&v| v as i64).collect();
            (0..d)
                .map(|i| {
                    w.sigma_inv_q
                        .row(i)
                        .iter()
                        .zip(&x64)
                        .map(|(s, v)| s * v)
                        .sum::<i64>() as i128
                })
                .collect()
        }
        Some(b) if b < (1u128 << 127) => (0..d)
            .map(|i| {
                w.sigma_inv_q
                    .row(i)
                    .iter()
                    .zip(&x)
                    .map(|(&s, &v)| s as i128 * v)
                    .sum()
            })
            .collect(),
        _ => return evaluate_form_field(w),
    };
    Ok(x.iter().zip(&t).fold(FieldElement::ZERO, |acc, (&xi, &ti)| {
        acc + FieldElement::from_i128(xi) * FieldElement::from_i128(ti)
    }))
}

pub fn check_constraints(w: &QuantizedWitness) -> Result<ConstraintResult> {
    check_shapes(w)?;
    let d = w.dim();
    let x = differences(w);
    let x_hat: Vec<FieldElement> = x.iter().map(|&v| FieldElement::from_i128(v)).collect();
    let half = MODULUS.shr1();
    let bound = FieldElement::from_u256(w.tau_sq_scaled);

    let range_ok = static_range_ok(d, w.diff_bound_q, w.matrix_bound_q)
        && w.tau_sq_scaled <= half
        && x.iter().all(|v| v.unsigned_abs() <= w.diff_bound_q)
        && w.sigma_inv_q.max_abs() as u128 <= w.matrix_bound_q;
    if !range_ok {
        return Ok(ConstraintResult {
            x_hat,
            form_value: FieldElement::ZERO,
            bound,
            range_ok,
            verdict: Verdict::RangeViolation,
        });
    }

    let form_value = evaluate_form(w)?;
    let (negative, magnitude) = form_value.to_signed();
    let verdict = if negative || magnitude <= w.tau_sq_scaled {
        Verdict::Pass
    } else {
        Verdict::Reject
    };
    Ok(ConstraintResult {
        x_hat,
        form_value,
        bound,
        range_ok,
        verdict,
    })
}

pub const PUBLIC_INPUTS_FORMAT_VERSION: u32 = 1;

/// Public inputs a proving backend would commit to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicInputs {
    pub format_version: u32,
    pub field_modulus: U256,
    pub frac_bits: u32,
    pub threshold_bound: U256,
    pub corpus_hash: String,
    pub audit_id: String,
    pub verdict: Verdict,
}

pub fn public_inputs(w: &QuantizedWitness, result: &ConstraintResult, corpus_hash: &str, audit_id: &str) -> PublicInputs {
    PublicInputs {
        format_version: PUBLIC_INPUTS_FORMAT_VERSION,
        field_modulus: MODULUS,
        frac_bits: w.frac_bits,
        threshold_bound: w.tau_sq_scaled,
        corpus_hash: corpus_hash.to_string(),
        audit_id: audit_id.to_string(),
        verdict: result.verdict,
    }
}

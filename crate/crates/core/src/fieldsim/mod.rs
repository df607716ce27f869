//! Bit-exact simulation of the audit constraints over the BN254 scalar field.

mod agreement;
mod circuit;
mod field;
mod u256;

pub use agreement::{fp_field_agreement, fp_field_agreement_with, quantized_audit, AgreementReport, QuantizedAudit};
pub use circuit::{
    check_constraints, evaluate_form, evaluate_form_field, public_inputs, static_range_ok, ConstraintResult,
    PublicInputs, Verdict, PUBLIC_INPUTS_FORMAT_VERSION,
};
pub use field::{FieldElement, MODULUS};
pub use u256::U256;

//! Fixed-point encoding of the decision rule.
//!
//! Vectors and the inverse covariance are scaled by `2^k` and rounded half
//! away from zero. The quadratic form `x̂ᵀ Σ̂⁻¹ x̂` then carries scale `2^{3k}`,
//! so the squared threshold is encoded as `round(τ² 2^{3k})`. Integers are
//! signed here; field representatives are the business of `fieldsim`.

use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fieldsim::U256;
use crate::monitor::MonitorModel;

pub const WITNESS_FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_FRAC_BITS: [u32; 3] = [8, 16, 32];

/// Quantized magnitudes are kept below this so differences and products of
/// pairs stay inside `i64`/`i128`.
const MAX_QUANT: f64 = 4_611_686_018_427_387_904.0; // 2^62

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub frac_bits: u32,
    /// Bound on |coordinate| of `v_act` and `v_doc`.
    pub clip: f64,
    /// Bound on |entry| of Σ⁻¹. `None` takes the largest entry of the model.
    pub matrix_clip: Option<f64>,
}

impl QuantConfig {
    pub fn new(frac_bits: u32, clip: f64) -> Result<Self> {
        let cfg = Self {
            frac_bits,
            clip,
            matrix_clip: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `clip` = 2 × the 99.9th percentile of calibration coordinate magnitudes.
    pub fn for_model(model: &MonitorModel, frac_bits: u32) -> Result<Self> {
        Self::new(frac_bits, 2.0 * model.stats.coord_p999)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_FRAC_BITS.contains(&self.frac_bits) {
            return Err(Error::Configuration(format!(
                "fraction bits must be one of {SUPPORTED_FRAC_BITS:?}, got {}",
                self.frac_bits
            )));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::Configuration(format!("clip must be finite and positive, got {}", self.clip)));
        }
        if let Some(mc) = self.matrix_clip {
            if !(mc.is_finite() && mc > 0.0) {
                return Err(Error::Configuration(format!("matrix clip must be finite and positive, got {mc}")));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.frac_bits as i32)
    }

    /// Integer bound on quantized input coordinates, `ceil(clip 2^k)`.
    pub fn clip_q(&self) -> u128 {
        (self.clip * self.scale()).ceil() as u128
    }
}

fn quantize_scalar(v: f64, scale: f64, clip: f64) -> Result<i64> {
    if !(v.abs() <= clip) {
        return Err(Error::Range(format!("value {v} exceeds clip {clip}")));
    }
    let q = (v * scale).round();
    if q.abs() >= MAX_QUANT {
        return Err(Error::Range(format!("value {v} at scale {scale} does not fit the integer encoding")));
    }
    Ok(q as i64)
}

/// `round(v_i 2^k)`, half away from zero.
pub fn quantize_vector(v: &[f64], cfg: &QuantConfig) -> Result<Vec<i64>> {
    let scale = cfg.scale();
    v.iter().map(|&x| quantize_scalar(x, scale, cfg.clip)).collect()
}

pub fn dequantize(q: &[i64], frac_bits: u32) -> Vec<f64> {
    let inv = 2f64.powi(-(frac_bits as i32));
    q.iter().map(|&x| x as f64 * inv).collect()
}

/// Dense row-major integer matrix. The largest magnitude is computed once at
/// construction so per-witness range gates need not rescan the entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantMatrix {
    dim: usize,
    data: Vec<i64>,
    max_abs: u64,
}

impl QuantMatrix {
    pub fn new(dim: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Schema(format!(
                "matrix of dimension {dim} needs {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        let max_abs = data.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        Ok(Self { dim, data, max_abs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[i64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn max_abs(&self) -> u64 {
        self.max_abs
    }
}

impl Serialize for QuantMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<String>> = (0..self.dim)
            .map(|i| self.row(i).iter().map(i64::to_string).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuantMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<String>>::deserialize(d)?;
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(serde::de::Error::custom("matrix is not square"));
            }
            for v in row {
                data.push(v.parse().map_err(serde::de::Error::custom)?);
            }
        }
        QuantMatrix::new(dim, data).map_err(serde::de::Error::custom)
    }
}

mod decimal_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[i64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(i64::to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<i64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

mod decimal_u128 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything the constraint system sees for one audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedWitness {
    pub format_version: u32,
    pub frac_bits: u32,
    #[serde(with = "decimal_vec")]
    pub v_act_q: Vec<i64>,
    #[serde(with = "decimal_vec")]
    pub v_doc_q: Vec<i64>,
    pub sigma_inv_q: Arc<QuantMatrix>,
    /// `(τ_eff)² 2^{3k}` as an integer.
    pub tau_sq_scaled: U256,
    /// Range gate on `|x̂_i|`.
    #[serde(with = "decimal_u128")]
    pub diff_bound_q: u128,
    /// Range gate on `|Σ̂⁻¹_ij|`.
    #[serde(with = "decimal_u128")]
    pub matrix_bound_q: u128,
}

impl QuantizedWitness {
    pub fn dim(&self) -> usize {
        self.v_act_q.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: QuantizedWitness = serde_json::from_str(s)?;
        if w.format_version != WITNESS_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "witness format version {} is not supported (expected {WITNESS_FORMAT_VERSION})",
                w.format_version
            )));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyMargin {
    pub epsilon: f64,
    pub tau_safe: f64,
    /// Bound on `||v_act - v_doc||_inf` the margin assumes; enforced by the
    /// witness range gate.
    pub calib_bound: f64,
    /// Worst-case drift of the squared form, `D² - x̂ᵀΣ̂⁻¹x̂ / 2^{3k}`.
    pub drift_bound: f64,
}

/// Conservative threshold for the quantized check.
///
/// With `x` the real difference, `y = x̂/2^k` and `A = Σ̂⁻¹/2^k`, rounding
/// gives `|y_i - x_i| ≤ 2^{-k}` and `|A_ij - Σ⁻¹_ij| ≤ 2^{-k-1}`, hence
///
/// ```text
/// D² = xᵀΣ⁻¹x ≤ yᵀAy + 2 d 2^{-k} λ_max(Σ⁻¹) B + 2^{-k-1} d² (B + 2^{-k})²
/// ```
///
/// for `||x||_inf ≤ B`. Passing under `tau_safe² = τ*² - Δ` therefore implies
/// `D ≤ τ*`. To first order in the leading term
/// `ε ≈ (1/τ*) · d · 2^{-k} · λ_max(Σ⁻¹) · B`, i.e. `C = 1/τ*`.
pub fn safety_margin(model: &MonitorModel, cfg: &QuantConfig, calib_bound: f64) -> Result<SafetyMargin> {
    cfg.validate()?;
    if !(calib_bound.is_finite() && calib_bound > 0.0) {
        return Err(Error::Configuration(format!("calib_bound must be positive, got {calib_bound}")));
    }
    let d = model.hidden_dim() as f64;
    let h = 2f64.powi(-(cfg.frac_bits as i32));
    let tau = model.tau_star;
    let lambda = model.covariance.lambda_max_inv();
    let linear = 2.0 * d * h * lambda * calib_bound;
    let matrix = 0.5 * h * d * d * (calib_bound + h).powi(2);
    // floating-point slack: the FP score uses the spectral form, the witness
    // the materialized dense inverse
    let fp_slack = 1e-10 * lambda * d * calib_bound * calib_bound + tau * tau * 1e-12;
    let drift = (linear + matrix) * (1.0 + 1e-9) + fp_slack;
    let tau_safe_sq = tau * tau - drift;
    if !(tau_safe_sq > 0.0) {
        return Err(Error::Configuration(format!(
            "safety margin consumes the whole threshold at k = {} (drift {drift:.3e} ≥ τ*² {:.3e})",
            cfg.frac_bits,
            tau * tau
        )));
    }
    let tau_safe = tau_safe_sq.sqrt();
    Ok(SafetyMargin {
        epsilon: tau - tau_safe,
        tau_safe,
        calib_bound,
        drift_bound: drift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdMode {
    Exact,
    Safe { calib_bound: f64 },
}

/// Quantized Σ⁻¹ and threshold, shared by all witnesses of one model.
#[derive(Debug, Clone)]
pub struct QuantizedRule {
    pub cfg: QuantConfig,
    pub sigma_inv_q: Arc<QuantMatrix>,
    pub tau_sq_scaled: U256,
    pub diff_bound_q: u128,
    pub matrix_bound_q: u128,
    pub margin: Option<SafetyMargin>,
}

impl QuantizedRule {
    pub fn new(model: &MonitorModel, cfg: &QuantConfig, mode: ThresholdMode) -> Result<Self> {
        cfg.validate()?;
        let scale = cfg.scale();
        let inv = model.covariance.sigma_inv();
        let matrix_clip = cfg
            .matrix_clip
            .unwrap_or_else(|| inv.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        let d = inv.nrows();
        // nalgebra is column-major; Σ⁻¹ is symmetric but read it row-wise anyway
        let mut data = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                data.push(quantize_scalar(inv[(i, j)], scale, matrix_clip)?);
            }
        }
        let sigma_inv_q = Arc::new(QuantMatrix::new(d, data)?);
        let matrix_bound_q = (matrix_clip * scale).ceil() as u128;

        let (tau_eff, margin, diff_bound_q) = match mode {
            ThresholdMode::Exact => (model.tau_star, None, 2 * cfg.clip_q()),
            ThresholdMode::Safe { calib_bound } => {
                let m = safety_margin(model, cfg, calib_bound)?;
                // |x̂_i| ≤ floor(B 2^k) - 1 implies |x_i| ≤ B for the real difference
                let gate = ((calib_bound * scale).floor() as u128).saturating_sub(1);
                (m.tau_safe, Some(m), gate)
            }
        };
        let round_down = margin.is_some();
        let scaled = tau_eff * tau_eff * 2f64.powi(3 * cfg.frac_bits as i32);
        let tau_sq_scaled = U256::from_f64(scaled, round_down)
            .ok_or_else(|| Error::Range(format!("scaled threshold {scaled:e} does not fit 256 bits")))?;
        Ok(Self {
            cfg: *cfg,
            sigma_inv_q,
            tau_sq_scaled,
            diff_bound_q,
            matrix_bound_q,
            margin,
        })
    }

    pub fn witness(&self, v_act: &[f64], v_doc: &[f64]) -> Result<QuantizedWitness> {
        if v_act.len() != self.sigma_inv_q.dim() || v_doc.len() != self.sigma_inv_q.dim() {
            return Err(Error::Argument(format!(
                "witness vectors have lengths ({}, {}), model dimension is {}",
                v_act.len(),
                v_doc.len(),
                self.sigma_inv_q.dim()
            )));
        }
        Ok(QuantizedWitness {
            format_version: WITNESS_FORMAT_VERSION,
            frac_bits: self.cfg.frac_bits,
            v_act_q: quantize_vector(v_act, &self.cfg)?,
            v_doc_q: quantize_vector(v_doc, &self.cfg)?,
            sigma_inv_q: Arc::clone(&self.sigma_inv_q),
            tau_sq_scaled: self.tau_sq_scaled,
            diff_bound_q: self.diff_bound_q,
            matrix_bound_q: self.matrix_bound_q,
        })
    }
}

/// One-shot witness construction. The safe threshold uses the model's
/// largest faithful calibration residual as the `||x||_inf` bound.
pub fn build_witness(
    model: &MonitorModel,
    v_act: &[f64],
    v_doc: &[f64],
    cfg: &QuantConfig,
    use_safe_threshold: bool,
) -> Result<QuantizedWitness> {
    let mode = if use_safe_threshold {
        ThresholdMode::Safe {
            calib_bound: model.stats.max_residual_inf,
        }
    } else {
        ThresholdMode::Exact
    };
    QuantizedRule::new(model, cfg, mode)?.witness(v_act, v_doc)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::fieldsim::{check_constraints, Verdict};
    use crate::monitor::{CalibrationConfig, CalibrationStats, Provenance, ShrunkCovariance, MODEL_FORMAT_VERSION};
    use crate::pooling::{IdfTable, PoolingConfig};
    use crate::projector::AffineProjector;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Identity projector and a scaled-identity covariance `variance · I`.
    pub(crate) fn isotropic_model(d: usize, variance: f64, tau: f64) -> MonitorModel {
        MonitorModel {
            format_version: MODEL_FORMAT_VERSION,
            layer_index: 0,
            pooling: PoolingConfig::default(),
            idf: IdfTable {
                idf: Default::default(),
                corpus_size: 0,
            },
            projector: AffineProjector {
                weights: DMatrix::identity(d, d),
                bias: DVector::zeros(d),
                ridge_lambda: 0.0,
                standardization: None,
            },
            covariance: ShrunkCovariance {
                dim: d,
                n_samples: 0,
                shrinkage: 1.0,
                target_scale: variance,
                floor: variance,
                basis: DMatrix::zeros(d, 0),
                excess: DVector::zeros(0),
            },
            tau_star: tau,
            stats: CalibrationStats {
                coord_p999: 1.0,
                max_residual_inf: 1.0,
                youden_j: 1.0,
            },
            provenance: Provenance {
                calibration_hash: String::new(),
                n_calibration: 0,
                n_faithful: 0,
                config: CalibrationConfig::default(),
            },
        }
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let cfg = QuantConfig::new(16, 1.0).unwrap();
        assert_eq!(quantize_vector(&[0.5, -0.5], &cfg).unwrap(), vec![32768, -32768]);
        let tiny = 2f64.powi(-17);
        assert_eq!(quantize_vector(&[tiny, -tiny], &cfg).unwrap(), vec![1, -1]);
    }

    #[test]
    fn dequantization_error_is_half_ulp() {
        let cfg = QuantConfig::new(8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..10_000).map(|_| rng.random_range(-4.0..4.0)).collect();
        let back = dequantize(&quantize_vector(&v, &cfg).unwrap(), 8);
        let worst = v.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 2f64.powi(-9), "{worst}");
    }

    #[test]
    fn clip_and_config_errors() {
        let cfg = QuantConfig::new(16, 1.0).unwrap();
        assert!(matches!(quantize_vector(&[1.5], &cfg), Err(Error::Range(_))));
        assert!(matches!(quantize_vector(&[f64::NAN], &cfg), Err(Error::Range(_))));
        assert!(matches!(QuantConfig::new(12, 1.0), Err(Error::Configuration(_))));
        assert!(matches!(QuantConfig::new(16, 0.0), Err(Error::Configuration(_))));
    }

    #[test]
    fn unit_case_scales_to_two_pow_48() {
        let model = isotropic_model(1, 1.0, 1.0);
        let cfg = QuantConfig::new(16, 4.0).unwrap();
        let w = build_witness(&model, &[1.0], &[0.0], &cfg, false).unwrap();
        assert_eq!(w.tau_sq_scaled, U256::ONE.shl(48));
        assert_eq!(w.sigma_inv_q.data(), &[1 << 16]);
        let r = check_constraints(&w).unwrap();
        assert_eq!(r.form_value.to_u256(), U256::ONE.shl(48));
        assert_eq!(r.verdict, Verdict::Pass);

        let above = 1.0 + 2f64.powi(-16);
        let w = build_witness(&model, &[above], &[0.0], &cfg, false).unwrap();
        assert_eq!(check_constraints(&w).unwrap().verdict, Verdict::Reject);
    }

    #[test]
    fn identical_states_pass() {
        let model = isotropic_model(3, 0.5, 0.1);
        let v = [0.3, -1.2, 0.7];
        for (k, safe) in [(8, false), (16, true)] {
            let cfg = QuantConfig::new(k, 2.0).unwrap();
            let w = build_witness(&model, &v, &v, &cfg, safe).unwrap();
            let r = check_constraints(&w).unwrap();
            assert!(r.form_value.is_zero());
            assert_eq!(r.verdict, Verdict::Pass);
        }
    }

    #[test]
    fn margin_shrinks_with_precision() {
        let model = isotropic_model(16, 0.25, 3.0);
        let eps: Vec<f64> = SUPPORTED_FRAC_BITS
            .iter()
            .map(|&k| safety_margin(&model, &QuantConfig::new(k, 4.0).unwrap(), 0.5).unwrap().epsilon)
            .collect();
        assert!(eps[0] > eps[1] && eps[1] > eps[2]);
        assert!(eps[2] < 1e-6);
        let m = safety_margin(&model, &QuantConfig::new(16, 4.0).unwrap(), 0.5).unwrap();
        assert!(m.tau_safe < model.tau_star);
    }

    #[test]
    fn margin_larger_than_threshold_is_rejected() {
        let model = isotropic_model(64, 1e-4, 0.05);
        let cfg = QuantConfig::new(8, 4.0).unwrap();
        assert!(matches!(safety_margin(&model, &cfg, 1.0), Err(Error::Configuration(_))));
    }

    #[test]
    fn safe_mode_gates_the_assumed_residual_bound() {
        let model = isotropic_model(2, 1.0, 10.0);
        let cfg = QuantConfig::new(16, 8.0).unwrap();
        let rule = QuantizedRule::new(&model, &cfg, ThresholdMode::Safe { calib_bound: 1.0 }).unwrap();
        assert_eq!(rule.diff_bound_q, (1 << 16) - 1);
        let w = rule.witness(&[1.5, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(check_constraints(&w).unwrap().verdict, Verdict::RangeViolation);
    }

    #[test]
    fn witness_json_round_trip() {
        let model = isotropic_model(2, 1.0, 1.0);
        let cfg = QuantConfig::new(32, 4.0).unwrap();
        let w = build_witness(&model, &[1.0, -3.5], &[0.25, 0.0], &cfg, false).unwrap();
        let json = w.to_json().unwrap();
        assert!(json.contains("\"v_act_q\":[\"4294967296\",\"-15032385536\"]"));
        assert_eq!(QuantizedWitness::from_json(&json).unwrap(), w);
    }
}

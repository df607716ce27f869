//! Ledoit-Wolf shrinkage covariance and the Mahalanobis distance.
//!
//! The estimate is `(1 - s) S + s mu I` with `S` the (1/n) sample covariance
//! of the centered residuals, `mu = trace(S) / d` and `s` the analytic
//! shrinkage intensity clipped to `[0, 1]`.
//!
//! The matrix is held in spectral form `sigma = a I + Q diag(e) Q^T`, where
//! `Q` (d x r) spans the non-null eigenspace of `S`. With `n` calibration
//! residuals `r <= n - 1`, so quadratic forms cost O(d r) rather than O(d^2),
//! and the dense matrices are only materialized on request.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrunkCovariance {
    pub dim: usize,
    pub n_samples: usize,
    /// Shrinkage intensity in `[0, 1]`.
    pub shrinkage: f64,
    /// `trace(S) / d`, the scale of the identity target.
    pub target_scale: f64,
    /// Isotropic floor `a`.
    pub floor: f64,
    #[serde(with = "serde_matrix")]
    pub basis: DMatrix<f64>,
    /// Eigenvalue excess over the floor along each basis column.
    #[serde(with = "serde_vector")]
    pub excess: DVector<f64>,
}

/// Relative cutoff below which sample-covariance eigenvalues count as null.
const NULL_EIGEN_RTOL: f64 = 1e-12;
/// Jitter added when the floor would leave the estimate singular.
const JITTER: f64 = 1e-10;

pub fn fit_covariance<R: AsRef<[f64]>>(residuals: &[R]) -> Result<ShrunkCovariance> {
    let n = residuals.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "covariance needs at least 2 residual vectors, got {n}"
        )));
    }
    let d = residuals[0].as_ref().len();
    if d == 0 || residuals.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::Argument("residual vectors must share a non-zero dimension".into()));
    }
    if residuals.iter().flat_map(|r| r.as_ref()).any(|x| !x.is_finite()) {
        return Err(Error::Argument("residuals contain non-finite values".into()));
    }

    let mut x = linalg::rows_to_matrix(residuals);
    let mean = linalg::column_means(&x);
    linalg::center_rows(&mut x, &mean);

    let nf = n as f64;
    let df = d as f64;
    let row_sq: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
    let trace_s = row_sq.iter().sum::<f64>() / nf;
    let fourth: f64 = row_sq.iter().map(|v| v * v).sum();

    // ||X X^T||_F = ||X^T X||_F; work with whichever Gram matrix is smaller.
    let small_side = n <= d;
    let gram = if small_side {
        &x * x.transpose()
    } else {
        x.transpose() * &x
    };
    let frob_sq = gram.norm_squared();

    let mu = trace_s / df;
    if mu <= 0.0 {
        return Err(Error::Argument("residuals have zero variance".into()));
    }
    let delta = frob_sq / (nf * nf) - mu * mu * df;
    let beta_bar = (fourth - frob_sq / nf) / (nf * nf);
    let shrinkage = if delta > 0.0 {
        (beta_bar.min(delta) / delta).clamp(0.0, 1.0)
    } else {
        1.0
    };

    let (vals, vecs) = linalg::sym_eigen_desc(gram / nf);
    let top = vals[0].max(0.0);
    let rank = vals.iter().take_while(|v| **v > NULL_EIGEN_RTOL * top && **v > 0.0).count();
    let basis = if small_side {
        let mut q = DMatrix::zeros(d, rank);
        for k in 0..rank {
            let mut col = x.transpose() * vecs.column(k);
            col /= (nf * vals[k]).sqrt();
            q.set_column(k, &col);
        }
        q
    } else {
        vecs.columns(0, rank).into_owned()
    };
    let excess = DVector::from_fn(rank, |k, _| (1.0 - shrinkage) * vals[k]);

    let mut floor = shrinkage * mu;
    let smallest = if rank < d {
        floor
    } else {
        floor + excess.min()
    };
    if smallest <= 0.0 {
        floor += JITTER * mu;
    }

    Ok(ShrunkCovariance {
        dim: d,
        n_samples: n,
        shrinkage,
        target_scale: mu,
        floor,
        basis,
        excess,
    })
}

impl ShrunkCovariance {
    pub fn rank(&self) -> usize {
        self.excess.len()
    }

    fn spans_space(&self) -> bool {
        self.rank() == self.dim
    }

    /// `x^T sigma^{-1} x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let x = nalgebra::DVectorView::from_slice(x, x.len());
        let proj = self.basis.tr_mul(&x);
        let a = self.floor;
        let mut q: f64 = proj
            .iter()
            .zip(self.excess.iter())
            .map(|(p, e)| p * p / (a + e))
            .sum();
        if !self.spans_space() {
            let mut perp = x.into_owned();
            perp.gemv(-1.0, &self.basis, &proj, 1.0);
            q += perp.norm_squared() / a;
        }
        q
    }

    /// Smallest eigenvalue of sigma.
    pub fn lambda_min(&self) -> f64 {
        if self.spans_space() {
            self.floor + self.excess.min()
        } else {
            self.floor
        }
    }

    /// Largest eigenvalue of sigma.
    pub fn lambda_max(&self) -> f64 {
        self.floor + self.excess.iter().copied().fold(0.0, f64::max)
    }

    /// Largest eigenvalue of sigma^{-1}.
    pub fn lambda_max_inv(&self) -> f64 {
        1.0 / self.lambda_min()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        let mut s = DMatrix::identity(self.dim, self.dim) * self.floor;
        let scaled = &self.basis * DMatrix::from_diagonal(&self.excess);
        s.gemm(1.0, &scaled, &self.basis.transpose(), 1.0);
        s
    }

    pub fn sigma_inv(&self) -> DMatrix<f64> {
        let a = self.floor;
        let (mut out, coef) = if self.spans_space() && a == 0.0 {
            (
                DMatrix::zeros(self.dim, self.dim),
                self.excess.map(|e| 1.0 / e),
            )
        } else {
            (
                DMatrix::identity(self.dim, self.dim) / a,
                self.excess.map(|e| 1.0 / (a + e) - 1.0 / a),
            )
        };
        let scaled = &self.basis * DMatrix::from_diagonal(&coef);
        out.gemm(1.0, &scaled, &self.basis.transpose(), 1.0);
        // exact symmetry for downstream quantization
        let t = out.transpose();
        (out + t) * 0.5
    }

    /// The same estimate scaled by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            floor: self.floor * c,
            excess: &self.excess * c,
            target_scale: self.target_scale * c,
            ..self.clone()
        }
    }
}

/// `sqrt((v_act - v_doc)^T sigma^{-1} (v_act - v_doc))`.
pub fn mahalanobis(cov: &ShrunkCovariance, v_act: &[f64], v_doc: &[f64]) -> Result<f64> {
    if v_act.len() != cov.dim || v_doc.len() != cov.dim {
        return Err(Error::Argument(format!(
            "mahalanobis: vectors of dimension {} / {}, covariance has {}",
            v_act.len(),
            v_doc.len(),
            cov.dim
        )));
    }
    let diff: Vec<f64> = v_act.iter().zip(v_doc).map(|(a, b)| a - b).collect();
    Ok(cov.quad_form(&diff).max(0.0).sqrt())
}

pub fn euclidean(v_act: &[f64], v_doc: &[f64]) -> f64 {
    v_act
        .iter()
        .zip(v_doc)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

//! Affine map from retriever space (dim `m`) into the residual stream (dim `d`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};

/// Per-coordinate input standardization applied before the linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub scale: DVector<f64>,
}

/// `y = W * z + b`, where `z` is the (optionally standardized) evidence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineProjector {
    #[serde(with = "serde_matrix")]
    pub weights: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub bias: DVector<f64>,
    pub ridge_lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl AffineProjector {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn project(&self, evidence: &[f64]) -> Result<DVector<f64>> {
        if evidence.len() != self.input_dim() {
            return Err(Error::Argument(format!(
                "evidence has dimension {}, projector expects {}",
                evidence.len(),
                self.input_dim()
            )));
        }
        let mut z = DVector::from_column_slice(evidence);
        if let Some(st) = &self.standardization {
            for ((zi, mu), s) in z.iter_mut().zip(st.mean.iter()).zip(st.scale.iter()) {
                *zi = (*zi - mu) / s;
            }
        }
        let mut out = self.bias.clone();
        out.gemv(1.0, &self.weights, &z, 1.0);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub lambda: f64,
    pub standardize: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            standardize: true,
        }
    }
}

fn pair_matrices(pairs: &[(&[f64], &[f64])]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = pairs.first().map_or(0, |p| p.0.len());
    let d = pairs.first().map_or(0, |p| p.1.len());
    if m == 0 || d == 0 {
        return Err(Error::Argument("projector pairs must be non-empty vectors".into()));
    }
    if pairs.iter().any(|(x, y)| x.len() != m || y.len() != d) {
        return Err(Error::Argument("projector pairs have inconsistent dimensions".into()));
    }
    let xs: Vec<&[f64]> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<&[f64]> = pairs.iter().map(|p| p.1).collect();
    Ok((linalg::rows_to_matrix(&xs), linalg::rows_to_matrix(&ys)))
}

/// Ridge fit without input standardization: minimizes
/// `sum ||W x_i + b - y_i||^2 + lambda ||W||_F^2` with `b` unpenalized.
pub fn fit_ridge(pairs: &[(&[f64], &[f64])], lambda: f64) -> Result<AffineProjector> {
    fit_ridge_with(
        pairs,
        &RidgeOptions {
            lambda,
            standardize: false,
        },
    )
}

pub fn fit_ridge_with(pairs: &[(&[f64], &[f64])], opts: &RidgeOptions) -> Result<AffineProjector> {
    let lambda = opts.lambda;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    if pairs.len() < 2 {
        return Err(Error::Argument(format!(
            "ridge fit needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let (mut x, mut y) = pair_matrices(pairs)?;
    let x_mean = linalg::column_means(&x);
    let y_mean = linalg::column_means(&y);
    linalg::center_rows(&mut x, &x_mean);
    linalg::center_rows(&mut y, &y_mean);

    let standardization = if opts.standardize {
        let n = x.nrows() as f64;
        let scale = DVector::from_fn(x.ncols(), |j, _| {
            let sd = (x.column(j).norm_squared() / n).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        });
        for (j, s) in scale.iter().enumerate() {
            x.column_mut(j).iter_mut().for_each(|v| *v /= s);
        }
        Some(Standardization {
            mean: x_mean.clone(),
            scale,
        })
    } else {
        None
    };

    let m = x.ncols();
    let mut gram = x.transpose() * &x;
    for i in 0..m {
        gram[(i, i)] += lambda;
    }
    let rhs = x.transpose() * &y;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("ridge normal equations are singular (lambda = {lambda})")))?;
    if lambda == 0.0 {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if lo * lo <= 1e-12 * hi * hi {
            return Err(Error::Singular("ridge normal equations are rank deficient at lambda = 0".into()));
        }
    }
    let weights = chol.solve(&rhs).transpose();
    let bias = match standardization {
        Some(_) => y_mean,
        None => &y_mean - &weights * &x_mean,
    };
    Ok(AffineProjector {
        weights,
        bias,
        ridge_lambda: lambda,
        standardization,
    })
}

/// Unsupervised alignment: evidence is expressed in its top-`rank` principal
/// axes, rescaled to the variances of the answer-side principal axes of the
/// same rank, and mapped into that basis. Uses no pairing or label
/// information beyond the two marginal distributions.
pub fn fit_pca_align(pairs: &[(&[f64], &[f64])], rank: usize) -> Result<AffineProjector> {
    let (mut x, mut y) = pair_matrices(pairs)?;
    let (n, m, d) = (x.nrows(), x.ncols(), y.ncols());
    if rank == 0 || rank > m.min(d).min(n) {
        return Err(Error::Argument(format!(
            "pca rank {rank} outside 1..={}",
            m.min(d).min(n)
        )));
    }
    let x_mean = linalg::column_means(&x);
    let y_mean = linalg::column_means(&y);
    linalg::center_rows(&mut x, &x_mean);
    linalg::center_rows(&mut y, &y_mean);
    let (ax, vx) = linalg::principal_axes(&x, rank);
    let (ay, vy) = linalg::principal_axes(&y, rank);
    if vx.iter().any(|v| *v <= 0.0) {
        return Err(Error::Singular(format!(
            "evidence has fewer than {rank} directions with non-zero variance"
        )));
    }
    let gain = DVector::from_fn(rank, |k, _| (vy[k] / vx[k]).sqrt());
    let weights = ay * DMatrix::from_diagonal(&gain) * ax.transpose();
    let bias = &y_mean - &weights * &x_mean;
    Ok(AffineProjector {
        weights,
        bias,
        ridge_lambda: 0.0,
        standardization: None,
    })
}

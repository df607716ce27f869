//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Builds an `n x p` matrix from `n` equal-length rows.
pub fn rows_to_matrix<R: AsRef<[f64]>>(rows: &[R]) -> DMatrix<f64> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.as_ref().len());
    DMatrix::from_fn(n, p, |i, j| rows[i].as_ref()[j])
}

/// Column means of an `n x p` matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n)
}

/// Subtracts `mean` from every row in place.
pub fn center_rows(m: &mut DMatrix<f64>, mean: &DVector<f64>) {
    for j in 0..m.ncols() {
        let mu = mean[j];
        m.column_mut(j).iter_mut().for_each(|x| *x -= mu);
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Eigenvector signs are normalized so the entry with the
/// largest magnitude is positive.
pub fn sym_eigen_desc(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = eig.eigenvectors.select_columns(&order);
    for mut col in vectors.column_iter_mut() {
        let lead = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            col.neg_mut();
        }
    }
    (values, vectors)
}

/// Top-`rank` principal axes of already-centered rows (`n x p`), together with
/// the variance (divided by `n`) along each axis. Uses the `n x n` Gram matrix
/// when `n < p`.
pub fn principal_axes(centered: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = centered.shape();
    let nf = n as f64;
    if n < p {
        let gram = centered * centered.transpose();
        let (vals, vecs) = sym_eigen_desc(gram);
        let mut axes = DMatrix::zeros(p, rank);
        for k in 0..rank {
            let lam = vals[k].max(0.0);
            let mut axis = centered.transpose() * vecs.column(k);
            let norm = axis.norm();
            if lam > 0.0 && norm > 0.0 {
                axis /= norm;
            }
            let lead = axis.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                axis.neg_mut();
            }
            axes.set_column(k, &axis);
        }
        let variances = DVector::from_fn(rank, |k, _| vals[k].max(0.0) / nf);
        (axes, variances)
    } else {
        let cov = centered.transpose() * centered;
        let (vals, vecs) = sym_eigen_desc(cov);
        let axes = vecs.columns(0, rank).into_owned();
        let variances = DVector::from_fn(rank, |k, _| vals[k].max(0.0) / nf);
        (axes, variances)
    }
}

/// Serde adapters: matrices as row-major nested decimal arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(super::rows_to_matrix(&rows))
    }
}

pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

//! Small dense linear-algebra helpers shared by the transform builders.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{FilterError, Result};

/// Orthonormal (Helmert) basis of the complement of `1` in `R^m`, as an
/// `m x (m-1)` matrix.
pub fn complement_basis(m: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(m, m.saturating_sub(1));
    for k in 1..m {
        let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            b[(i, k - 1)] = scale;
        }
        b[(k, k - 1)] = -(k as f64) * scale;
    }
    b
}

/// Embeds an `(m-1) x (m-1)` orthogonal matrix acting on the complement of
/// `1` into an `m x m` orthogonal matrix with `Q 1 = 1`.
pub fn embed_on_complement(inner: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    let m = basis.nrows();
    let mut q = basis * inner * basis.transpose();
    q.add_scalar_mut(1.0 / m as f64);
    q
}

/// Symmetric positive semi-definite square root; negative eigenvalues from
/// round-off are clamped to zero.
pub fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    symmetrize(&(scaled * v.transpose()))
}

/// Inverse symmetric square root of a symmetric positive definite matrix.
pub fn spd_inv_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(FilterError::InvalidParameter(
            "matrix is not positive definite".into(),
        ));
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= eig.eigenvalues[j].sqrt();
    }
    Ok(symmetrize(&(scaled * v.transpose())))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `P A P` with `P = I - 1 1^T / m`, computed with rank-one updates.
pub fn project_centered(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let inv = 1.0 / m as f64;
    let row_means: Vec<f64> = a.row_iter().map(|r| r.sum() * inv).collect();
    let col_means: Vec<f64> = a.column_iter().map(|c| c.sum() * inv).collect();
    let total = row_means.iter().sum::<f64>() * inv;
    DMatrix::from_fn(m, a.ncols(), |i, j| a[(i, j)] - row_means[i] - col_means[j] + total)
}

/// Orthogonal polar factor `X Y^T` of `a = X S Y^T`.
pub fn polar_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.is_empty() {
        return Ok(a.clone());
    }
    let svd = a.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => Ok(u * v_t),
        _ => Err(FilterError::SvdFailed),
    }
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.amax()
}

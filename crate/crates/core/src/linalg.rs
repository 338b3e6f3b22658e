//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetrize(m).symmetric_eigen().eigenvalues.max()
}

/// Cholesky succeeds and every entry is finite.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.iter().all(|v| v.is_finite()) && m.clone().cholesky().is_some()
}

/// Induced 2-norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Orthonormal basis (as columns) of `{p : rows · p = 0}`.
///
/// `rows` is `r × k`; the result is `k × (k - rank)`.
pub fn null_space(rows: &DMatrix<f64>, k: usize, rel_tol: f64) -> DMatrix<f64> {
    if rows.nrows() == 0 {
        return DMatrix::identity(k, k);
    }
    // Eigenvectors of rowsᵀ·rows with (numerically) zero eigenvalue span the
    // null space; symmetric_eigen is deterministic for identical input.
    let gram = rows.transpose() * rows;
    let eig = gram.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    let cols: alloc::vec::Vec<DVector<f64>> = (0..k)
        .filter(|&j| eig.eigenvalues[j].abs() <= rel_tol * scale)
        .map(|j| eig.eigenvectors.column(j).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Numerical rank of `m` from its singular values.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Infinity norm of a vector (0 for empty).
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

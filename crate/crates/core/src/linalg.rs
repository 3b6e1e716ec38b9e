//! Dense factorization helpers shared by every estimator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky of `a + jitter*I`; on failure the error carries the extreme
/// eigenvalues so the caller can see how ill-conditioned the matrix was.
pub fn cholesky_jittered(mut a: DMatrix<f64>, jitter: f64, context: impl Into<String>) -> Result<Chol> {
    for i in 0..a.nrows() {
        a[(i, i)] += jitter;
    }
    let diag_ok = (0..a.nrows()).all(|i| a[(i, i)].is_finite());
    if diag_ok {
        if let Some(c) = a.clone().cholesky() {
            return Ok(c);
        }
    }
    Err(GpError::Factorization {
        context: context.into(),
        size: a.nrows(),
        jitter,
        diagnosis: diagnose(&a),
    })
}

fn diagnose(a: &DMatrix<f64>) -> String {
    if a.iter().any(|v| !v.is_finite()) {
        return "matrix has non-finite entries".into();
    }
    let eig = a.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    format!("eigenvalues in [{lo:e}, {hi:e}], condition estimate {:e}", hi / lo.abs().max(f64::MIN_POSITIVE))
}

pub fn logdet(c: &Chol) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `L^{-1}` for the lower factor of `c`.
pub fn lower_inverse(c: &Chol) -> DMatrix<f64> {
    let l = c.l();
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("cholesky factor has a positive diagonal")
}

/// `L^{-1} b` for the lower factor of `c`.
pub fn whiten_vec(c: &Chol, b: &DVector<f64>) -> DVector<f64> {
    c.l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal")
}

pub fn whiten_mat(c: &Chol, b: &DMatrix<f64>) -> DMatrix<f64> {
    c.l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal")
}

/// Column-wise dot products `sum_r a[r,c] * b[r,c]`.
pub fn col_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    debug_assert_eq!(a.shape(), b.shape());
    DVector::from_iterator(a.ncols(), a.column_iter().zip(b.column_iter()).map(|(x, y)| x.dot(&y)))
}

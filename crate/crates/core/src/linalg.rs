//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn inv_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Ridge coefficients `(X'X + lambda I)^-1 X'y`.
pub fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut xtx = x.tr_mul(x);
    for i in 0..xtx.nrows() {
        xtx[(i, i)] += lambda;
    }
    solve_spd(&xtx, &x.tr_mul(y))
}

/// Symmetric (pseudo-)inverse square root. Eigenvalues at or below `tol`
/// are treated as zero.
pub fn sym_inv_sqrt(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        *v = if *v > tol { 1.0 / v.sqrt() } else { 0.0 };
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Column-major data to a dense `n x k` matrix.
pub fn from_columns(columns: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

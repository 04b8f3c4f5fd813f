//! Dense linear-algebra helpers shared by the exact solvers.

use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` by LU factorisation with partial pivoting.
pub(crate) fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Inverts a square matrix by LU factorisation.
pub(crate) fn inverse(a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.lu().try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Pseudo-inverse solver for a symmetric positive semi-definite Gram matrix.
///
/// Singular values below `rel_tol * sigma_max` are dropped, so rank-deficient
/// systems resolve to the minimum-norm solution.
#[derive(Debug, Clone)]
pub(crate) struct GramSolver {
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    eps: f64,
}

impl GramSolver {
    pub(crate) fn new(gram: DMatrix<f64>, rel_tol: f64) -> Self {
        let svd = gram.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let eps = (sigma_max * rel_tol).max(f64::MIN_POSITIVE);
        Self { svd, eps }
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.svd
            .solve(rhs, self.eps)
            .expect("svd computed with both singular-vector sets")
    }
}

/// Minimum-norm least-squares solution of `rows * x = targets`.
///
/// Returns the solution together with the largest absolute residual, which is
/// zero (up to round-off) exactly when the system is consistent.
pub(crate) fn min_norm_lstsq(rows: &DMatrix<f64>, targets: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = rows.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (sigma_max * 1e-12).max(f64::MIN_POSITIVE);
    let x = svd
        .solve(targets, eps)
        .expect("svd computed with both singular-vector sets");
    let residual = (rows * &x - targets).amax();
    (x, residual)
}

//! Symmetric matrix functions via eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalues below this are clamped before `log` and `sqrt`.
pub const EIG_FLOOR: f64 = 1e-14;

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `Q diag(f(λ)) Qᵀ` for symmetric `a`.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    eig_apply(&eig, f)
}

pub fn eig_apply(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let fl = f(*lambda);
        scaled.column_mut(j).scale_mut(fl);
    }
    let out = scaled * q.transpose();
    symmetrize(&out)
}

pub fn expm_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, f64::exp)
}

pub fn logm_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |l| l.max(EIG_FLOOR).ln())
}

pub fn sqrtm_spd(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |l| l.max(EIG_FLOOR).sqrt())
}

/// Square root and inverse square root from one decomposition.
pub fn sqrt_and_inv_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let s = eig_apply(&eig, |l| l.max(EIG_FLOOR).sqrt());
    let is = eig_apply(&eig, |l| 1.0 / l.max(EIG_FLOOR).sqrt());
    (s, is)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

//! Guarded dense linear algebra.
//!
//! Every inversion in the crate goes through [`sym_inverse`] or
//! [`inverse`]. Well-conditioned symmetric matrices are inverted through a
//! Cholesky factorization; once the condition number exceeds [`COND_CAP`]
//! the Moore-Penrose pseudo-inverse is used instead and a warning is logged.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GmmError, Result};

/// Condition-number cap beyond which inversions fall back to the pseudo-inverse.
pub const COND_CAP: f64 = 1e12;

/// Below this ratio of smallest to largest singular value a matrix is treated
/// as exactly rank deficient under [`InversePolicy::Strict`].
const RANK_TOL: f64 = 1e-14;

/// How to react when a matrix is badly conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversePolicy {
    /// Always return something: pseudo-inverse beyond the cap, never an error.
    PseudoFallback,
    /// Pseudo-inverse beyond the cap, but a numerically rank-deficient matrix is an error.
    Strict,
}

/// Symmetrize in place by averaging with the transpose.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GmmError::Singular(format!("{what} has non-finite entries")))
    }
}

/// Inverse of a symmetric matrix with a condition-number guard.
pub fn sym_inverse(a: &DMatrix<f64>, policy: InversePolicy, what: &str) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(GmmError::Dimension(format!("{what} is not square")));
    }
    check_finite(a, what)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let s = symmetrize(a);
    let eig = SymmetricEigen::new(s.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if max_abs == 0.0 {
        if policy == InversePolicy::Strict {
            return Err(GmmError::Singular(format!("{what} is the zero matrix")));
        }
        log::warn!("{what} is the zero matrix; using pseudo-inverse");
        return Ok(DMatrix::zeros(n, n));
    }
    if min > 0.0 && max_abs / min <= COND_CAP {
        if let Some(chol) = s.clone().cholesky() {
            return Ok(chol.inverse());
        }
    }
    if policy == InversePolicy::PseudoFallback && structurally_redundant(&s) {
        // Constant or duplicated coordinates (controls entering both sides,
        // intercepts) make the matrix singular by construction.
        log::debug!("{what} has redundant coordinates; using pseudo-inverse");
        return Ok(eig_pinv(&eig, max_abs / COND_CAP));
    }
    if policy == InversePolicy::Strict && min.abs() <= RANK_TOL * max_abs * n as f64 {
        return Err(GmmError::Singular(format!(
            "{what} is rank deficient (eigenvalue ratio {:.3e})",
            min.abs() / max_abs
        )));
    }
    log::warn!(
        "{what} is ill-conditioned (condition number {:.3e}); using pseudo-inverse",
        if min > 0.0 { max_abs / min } else { f64::INFINITY }
    );
    Ok(eig_pinv(&eig, max_abs / COND_CAP))
}

/// True when dropping zero rows and exact duplicate rows leaves a
/// well-conditioned matrix.
fn structurally_redundant(s: &DMatrix<f64>) -> bool {
    let n = s.nrows();
    let mut keep: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        if s.row(i).iter().all(|v| *v == 0.0) {
            continue;
        }
        if keep.iter().any(|&k| s.row(k) == s.row(i)) {
            continue;
        }
        keep.push(i);
    }
    if keep.is_empty() || keep.len() == n {
        return false;
    }
    let sub = s.select_rows(&keep).select_columns(&keep);
    let eig = SymmetricEigen::new(sub);
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    min > 0.0 && max_abs / min <= COND_CAP
}

fn eig_pinv(eig: &SymmetricEigen<f64, nalgebra::Dyn>, tol: f64) -> DMatrix<f64> {
    let n = eig.eigenvalues.len();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > tol {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// Inverse of a general square matrix with an SVD-based condition guard.
pub fn inverse(a: &DMatrix<f64>, policy: InversePolicy, what: &str) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(GmmError::Dimension(format!("{what} is not square")));
    }
    check_finite(a, what)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if n == 1 {
        let v = a[(0, 0)];
        if v == 0.0 {
            return match policy {
                InversePolicy::Strict => Err(GmmError::Singular(format!("{what} is zero"))),
                InversePolicy::PseudoFallback => Ok(DMatrix::zeros(1, 1)),
            };
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / v));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 {
        return match policy {
            InversePolicy::Strict => Err(GmmError::Singular(format!("{what} is the zero matrix"))),
            InversePolicy::PseudoFallback => Ok(DMatrix::zeros(n, n)),
        };
    }
    if smin > 0.0 && smax / smin <= COND_CAP {
        if let Some(inv) = a.clone().lu().try_inverse() {
            return Ok(inv);
        }
    }
    if policy == InversePolicy::Strict && smin <= RANK_TOL * smax * n as f64 {
        return Err(GmmError::Singular(format!(
            "{what} is rank deficient (singular value ratio {:.3e})",
            smin / smax
        )));
    }
    log::warn!("{what} is ill-conditioned; using pseudo-inverse");
    svd.pseudo_inverse(smax / COND_CAP)
        .map_err(|e| GmmError::Singular(format!("{what}: {e}")))
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let s = symmetrize(a);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute asymmetry relative to the largest entry.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(1e-300);
    (a - a.transpose()).amax() / scale
}

/// Check that `a` is symmetric positive definite via an eigenvalue floor.
pub fn check_spd(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(GmmError::Dimension(format!("{what} is not square")));
    }
    check_finite(a, what)?;
    if asymmetry(a) > 1e-10 {
        return Err(GmmError::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let floor = 1e-12 * a.amax().max(1e-300);
    let min = min_eigenvalue(a);
    if min <= floor {
        return Err(GmmError::NotPositiveDefinite(format!(
            "{what} has minimum eigenvalue {min:.3e}"
        )));
    }
    Ok(())
}

/// The `p × (m p)` matrix `v' ⊗ I_p` for an `m`-vector `v`.
pub fn kron_row_identity(v: &DVector<f64>, p: usize) -> DMatrix<f64> {
    let m = v.len();
    let mut out = DMatrix::zeros(p, m * p);
    for j in 0..m {
        for k in 0..p {
            out[(k, j * p + k)] = v[j];
        }
    }
    out
}

/// Reshape a row-stacked `vec(G')` of length `m p` back into the `m × p` matrix `G`.
pub fn unstack_rows(v: &DVector<f64>, m: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, p, v.as_slice())
}

/// Row-stack an `m × p` matrix into `vec(G')`.
pub fn stack_rows(g: &DMatrix<f64>) -> DVector<f64> {
    let (m, p) = g.shape();
    let mut out = DVector::zeros(m * p);
    for j in 0..m {
        for k in 0..p {
            out[j * p + k] = g[(j, k)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_inverse_uses_cholesky_path() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = sym_inverse(&a, InversePolicy::Strict, "a").unwrap();
        let eye = &a * &inv;
        assert!((eye - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn constant_coordinates_are_dropped() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0]);
        let inv = sym_inverse(&a, InversePolicy::PseudoFallback, "a").unwrap();
        let core = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]).try_inverse().unwrap();
        assert!((inv[(0, 0)] - core[(0, 0)]).abs() < 1e-14);
        assert!((inv[(2, 0)] - core[(1, 0)]).abs() < 1e-14);
        assert!(inv.row(1).amax() < 1e-14);
        assert!(structurally_redundant(&a));
        let dup = DMatrix::from_row_slice(3, 3, &[2.0, 2.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 3.0]);
        assert!(structurally_redundant(&dup));
        let pinv = sym_inverse(&dup, InversePolicy::PseudoFallback, "dup").unwrap();
        assert!((&dup * &pinv * &dup - &dup).amax() < 1e-10);
        assert!(sym_inverse(&a, InversePolicy::Strict, "a").is_err());
    }

    #[test]
    fn singular_symmetric_falls_back_to_pinv() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let pinv = sym_inverse(&a, InversePolicy::PseudoFallback, "a").unwrap();
        // Moore-Penrose conditions
        assert!((&a * &pinv * &a - &a).amax() < 1e-12);
        assert!((&pinv * &a * &pinv - &pinv).amax() < 1e-12);
        assert!(sym_inverse(&a, InversePolicy::Strict, "a").is_err());
    }

    #[test]
    fn general_inverse_and_rank_failure() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let inv = inverse(&a, InversePolicy::Strict, "a").unwrap();
        assert!((&a * inv - DMatrix::identity(2, 2)).amax() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            inverse(&s, InversePolicy::Strict, "s"),
            Err(GmmError::Singular(_))
        ));
    }

    #[test]
    fn kron_and_stacking() {
        let v = DVector::from_vec(vec![2.0, 3.0]);
        let k = kron_row_identity(&v, 2);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k[(0, 0)], 2.0);
        assert_eq!(k[(1, 1)], 2.0);
        assert_eq!(k[(0, 2)], 3.0);
        assert_eq!(k[(1, 3)], 3.0);
        assert_eq!(k[(0, 1)], 0.0);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = stack_rows(&g);
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unstack_rows(&s, 2, 2), g);
    }

    #[test]
    fn spd_check_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(check_spd(&a, "a").is_err());
        assert!(check_spd(&DMatrix::identity(3, 3), "i").is_ok());
    }
}

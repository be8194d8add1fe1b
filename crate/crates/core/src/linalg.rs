//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Force exact symmetry: (M + M^T) / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Largest absolute asymmetry |M - M^T|_max.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = m.clone_owned().symmetric_eigen().eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone_owned()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    // For symmetric inputs this is max |eig|; in general use eig of M^T M.
    let gram = m.transpose() * m;
    let lmax = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    lmax.max(0.0).sqrt()
}

/// Condition number of a symmetric positive definite matrix, +inf if singular.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solve S X = B for symmetric positive definite S via Cholesky.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = s.clone_owned().cholesky()?;
    Some(chol.solve(b))
}

/// True when M (symmetrized) admits a Cholesky factorization after adding
/// `shift` to the diagonal.
pub fn is_psd_within(m: &DMatrix<f64>, shift: f64) -> bool {
    let n = m.nrows();
    let mut s = symmetrize(m);
    for i in 0..n {
        s[(i, i)] += shift;
    }
    s.cholesky().is_some()
}

/// Quadratic congruence F X F^T.
pub fn sandwich(f: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    f * x * f.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetrize_fixes_drift() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-13, 3.0]);
        let s = symmetrize(&m);
        assert_eq!(s[(0, 1)], s[(1, 0)]);
        assert!(asymmetry(&s) == 0.0);
    }

    #[test]
    fn spectral_norm_matches_known() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert_relative_eq!(spectral_norm(&m), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn min_eig_of_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_relative_eq!(min_eig(&m), -1.0, epsilon = 1e-12);
    }
}

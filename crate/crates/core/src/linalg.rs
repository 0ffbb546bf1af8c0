//! Small dense linear-algebra helpers shared by the inference routines.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// Inverse of a symmetric positive-definite matrix, `None` if the factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

/// Inverse of an SPD matrix, adding `1e-8·I` once when the plain factorization fails.
/// The flag reports whether jitter was needed.
pub fn spd_inverse_jitter(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, bool)> {
    if let Some(inv) = spd_inverse(m) {
        return Some((inv, false));
    }
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * 1e-8;
    spd_inverse(&jittered).map(|inv| (inv, true))
}

/// `log det` of an SPD matrix via its Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let c = cholesky(m)?;
    Some(c.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}

/// Symmetric eigen-decomposition with eigenvalues clamped at zero, used where a
/// PSD matrix may carry tiny negative rounding noise.
pub fn psd_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    eig
}

/// `M^{-1/2}` for an SPD matrix (symmetric square root of the inverse).
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Some(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!((log_det_spd(&m).unwrap() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = inv_sqrt_spd(&m).unwrap();
        let back = &s * &s * &m;
        assert!((back - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn jitter_rescues_singular() {
        let m = DMatrix::zeros(2, 2);
        let (_, jittered) = spd_inverse_jitter(&m).unwrap();
        assert!(jittered);
    }
}

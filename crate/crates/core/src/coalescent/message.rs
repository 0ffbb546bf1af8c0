use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A covariance that is either diagonal (stored as a vector) or dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn zeros_diag(d: usize) -> Self {
        Covariance::Diag(DVector::zeros(d))
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        Covariance::Diag(DVector::from_element(d, s))
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diag(v) => v.len(),
            Covariance::Full(m) => m.nrows(),
        }
    }

    pub fn is_diag(&self) -> bool {
        matches!(self, Covariance::Diag(_))
    }

    pub fn to_full(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diag(v) => DMatrix::from_diagonal(v),
            Covariance::Full(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Diag(v) => v.clone(),
            Covariance::Full(m) => m.diagonal(),
        }
    }

    /// `self + s * other`; the result is diagonal only when both inputs are.
    pub fn add_scaled(&self, other: &Covariance, s: f64) -> Covariance {
        match (self, other) {
            (Covariance::Diag(a), Covariance::Diag(b)) => Covariance::Diag(a + b * s),
            _ => Covariance::Full(self.to_full() + other.to_full() * s),
        }
    }

    pub fn scale(&self, s: f64) -> Covariance {
        match self {
            Covariance::Diag(v) => Covariance::Diag(v * s),
            Covariance::Full(m) => Covariance::Full(m * s),
        }
    }

    /// Drops off-diagonal entries.
    pub fn to_diag(&self) -> Covariance {
        Covariance::Diag(self.diagonal())
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Covariance::Diag(v) => linalg::all_finite_vec(v),
            Covariance::Full(m) => linalg::all_finite_mat(m),
        }
    }

    /// Non-negative diagonal entries, or a symmetric PSD matrix (up to rounding).
    pub fn is_psd(&self) -> bool {
        match self {
            Covariance::Diag(v) => v.iter().all(|&x| x >= 0.0),
            Covariance::Full(m) => {
                let scale = m.amax().max(1.0);
                (m - m.transpose()).amax() <= 1e-9 * scale && linalg::min_eigenvalue(m) >= -1e-9 * scale
            }
        }
    }
}

/// Mean and variance message attached to a tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMessage {
    pub mean: DVector<f64>,
    pub var: Covariance,
}

impl GaussianMessage {
    pub fn new(mean: DVector<f64>, var: Covariance) -> Result<Self> {
        if mean.len() != var.dim() {
            return Err(Error::Dimension { expected: mean.len(), got: var.dim() });
        }
        Ok(GaussianMessage { mean, var })
    }

    /// A point mass (zero variance) in diagonal form.
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        GaussianMessage { mean, var: Covariance::zeros_diag(d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_valid(&self) -> bool {
        linalg::all_finite_vec(&self.mean) && self.var.is_finite() && self.var.is_psd()
    }

    /// The message after diffusing along a branch of length `t` (variance `+ t·Λ`).
    pub fn diffuse(&self, kernel: &Covariance, t: f64) -> GaussianMessage {
        GaussianMessage { mean: self.mean.clone(), var: self.var.add_scaled(kernel, t) }
    }

    /// Concatenates two independent blocks.
    pub fn concat(&self, other: &GaussianMessage) -> GaussianMessage {
        let mean = DVector::from_iterator(self.dim() + other.dim(), self.mean.iter().chain(other.mean.iter()).copied());
        let var = match (&self.var, &other.var) {
            (Covariance::Diag(a), Covariance::Diag(b)) => {
                Covariance::Diag(DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied()))
            }
            (a, b) => Covariance::Full(linalg::block_diag(&[&a.to_full(), &b.to_full()])),
        };
        GaussianMessage { mean, var }
    }

    /// Sub-message over coordinates `start..start+len` (marginal of a block).
    pub fn block(&self, start: usize, len: usize) -> GaussianMessage {
        let mean = self.mean.rows(start, len).into_owned();
        let var = match &self.var {
            Covariance::Diag(v) => Covariance::Diag(v.rows(start, len).into_owned()),
            Covariance::Full(m) => Covariance::Full(m.view((start, start), (len, len)).into_owned()),
        };
        GaussianMessage { mean, var }
    }
}

/// Normalized product of two Gaussian densities over the same variable.
///
/// Written as `mean = a.mean + A (A+B)^{-1} (b.mean - a.mean)` and
/// `var = A (A+B)^{-1} B`, which stays well defined when either variance is
/// singular (point masses) as long as `A + B` is invertible. `node` tags errors.
pub fn gaussian_product(a: &GaussianMessage, b: &GaussianMessage, node: usize) -> Result<GaussianMessage> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension { expected: a.dim(), got: b.dim() });
    }
    match (&a.var, &b.var) {
        (Covariance::Diag(va), Covariance::Diag(vb)) => {
            let d = a.dim();
            let mut mean = DVector::zeros(d);
            let mut var = DVector::zeros(d);
            for j in 0..d {
                let s = va[j] + vb[j];
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::numerical(node, format!("combined variance not positive in coordinate {j}")));
                }
                mean[j] = a.mean[j] + va[j] / s * (b.mean[j] - a.mean[j]);
                var[j] = va[j] * vb[j] / s;
            }
            Ok(GaussianMessage { mean, var: Covariance::Diag(var) })
        }
        _ => {
            let va = a.var.to_full();
            let vb = b.var.to_full();
            let s = &va + &vb;
            let chol = linalg::cholesky(&s)
                .ok_or_else(|| Error::numerical(node, "combined covariance is singular"))?;
            let diff = &b.mean - &a.mean;
            let mean = &a.mean + &va * chol.solve(&diff);
            let var = linalg::symmetrize(&(&va * chol.solve(&vb)));
            Ok(GaussianMessage { mean, var: Covariance::Full(var) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_diag_matches_precision_form() {
        let a = GaussianMessage::new(DVector::from_vec(vec![0.0, 1.0]), Covariance::Diag(DVector::from_vec(vec![2.0, 1.0]))).unwrap();
        let b = GaussianMessage::new(DVector::from_vec(vec![3.0, -1.0]), Covariance::Diag(DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        let p = gaussian_product(&a, &b, 0).unwrap();
        for j in 0..2 {
            let (va, vb) = (a.var.diagonal()[j], b.var.diagonal()[j]);
            let prec = 1.0 / va + 1.0 / vb;
            let mean = (a.mean[j] / va + b.mean[j] / vb) / prec;
            assert!((p.mean[j] - mean).abs() < 1e-14);
            assert!((p.var.diagonal()[j] - 1.0 / prec).abs() < 1e-14);
        }
    }

    #[test]
    fn full_and_diag_paths_agree() {
        let a = GaussianMessage::new(DVector::from_vec(vec![0.5, 1.0]), Covariance::Diag(DVector::from_vec(vec![2.0, 1.0]))).unwrap();
        let b = GaussianMessage::new(DVector::from_vec(vec![3.0, -1.0]), Covariance::Diag(DVector::from_vec(vec![1.0, 4.0]))).unwrap();
        let bf = GaussianMessage::new(b.mean.clone(), Covariance::Full(b.var.to_full())).unwrap();
        let p = gaussian_product(&a, &b, 0).unwrap();
        let q = gaussian_product(&a, &bf, 0).unwrap();
        assert!((p.mean - q.mean).norm() < 1e-13);
        assert!((p.var.to_full() - q.var.to_full()).norm() < 1e-13);
    }

    #[test]
    fn point_masses_need_spread() {
        let a = GaussianMessage::point(DVector::from_vec(vec![0.0]));
        assert!(gaussian_product(&a, &a, 7).is_err());
    }
}

//! Mutation kernels along tree branches and forward samplers for the two
//! generative stories.

mod synth;

pub use synth::{
    normalize_correlation, scaled_covariance,
    sample_da_instance, sample_mtl_instance, DaInstance, DaInstanceConfig, GroundTruth, MtlInstance,
    MtlInstanceConfig, TreeSource,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coalescent::Covariance;
use crate::error::{Error, Result};
use crate::linalg;

/// Brownian diffusion covariance Λ, diagonal or full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionKernel {
    cov: Covariance,
}

impl DiffusionKernel {
    /// Diagonal kernel; every entry must be strictly positive.
    pub fn diag(v: DVector<f64>) -> Result<Self> {
        if v.is_empty() || v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("diagonal diffusion entries must be finite and > 0"));
        }
        Ok(DiffusionKernel { cov: Covariance::Diag(v) })
    }

    /// Full kernel; must be symmetric PSD.
    pub fn full(m: DMatrix<f64>) -> Result<Self> {
        let cov = Covariance::Full(m);
        if cov.dim() == 0 || !cov.is_finite() || !cov.is_psd() {
            return Err(Error::invalid("full diffusion covariance must be finite, symmetric and PSD"));
        }
        Ok(DiffusionKernel { cov })
    }

    pub fn from_covariance(cov: Covariance) -> Result<Self> {
        match cov {
            Covariance::Diag(v) => Self::diag(v),
            Covariance::Full(m) => Self::full(m),
        }
    }

    /// `s·I` in diagonal form.
    pub fn isotropic(d: usize, s: f64) -> Result<Self> {
        Self::diag(DVector::from_element(d, s))
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn is_diag(&self) -> bool {
        self.cov.is_diag()
    }

    pub fn to_full_matrix(&self) -> DMatrix<f64> {
        self.cov.to_full()
    }

    /// Block-diagonal kernel over concatenated coordinates.
    pub fn concat(&self, other: &DiffusionKernel) -> DiffusionKernel {
        let cov = match (&self.cov, &other.cov) {
            (Covariance::Diag(a), Covariance::Diag(b)) => {
                Covariance::Diag(DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied()))
            }
            (a, b) => Covariance::Full(linalg::block_diag(&[&a.to_full(), &b.to_full()])),
        };
        DiffusionKernel { cov }
    }

    /// A matrix `L` with `L Lᵀ = Λ` (eigen-based, so semidefinite kernels work).
    pub fn sqrt(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Diag(v) => DMatrix::from_diagonal(&v.map(f64::sqrt)),
            Covariance::Full(m) => {
                let eig = linalg::psd_eigen(m);
                &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            }
        }
    }
}

/// Per-feature telegraph kernels for discrete inputs: equilibrium `q_d` and rate `Λ_dd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteKernel {
    equilibria: Vec<DVector<f64>>,
    rates: Vec<f64>,
}

impl DiscreteKernel {
    pub fn new(equilibria: Vec<DVector<f64>>, rates: Vec<f64>) -> Result<Self> {
        if equilibria.len() != rates.len() {
            return Err(Error::Dimension { expected: equilibria.len(), got: rates.len() });
        }
        for (d, q) in equilibria.iter().enumerate() {
            let sum: f64 = q.iter().sum();
            if q.is_empty() || q.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("equilibrium of feature {d} is not a distribution")));
            }
        }
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::invalid("discrete rates must be finite and > 0"));
        }
        Ok(DiscreteKernel { equilibria, rates })
    }

    pub fn num_features(&self) -> usize {
        self.rates.len()
    }

    pub fn equilibrium(&self, d: usize) -> &DVector<f64> {
        &self.equilibria[d]
    }

    pub fn rate(&self, d: usize) -> f64 {
        self.rates[d]
    }

    /// Applies the transition matrix of feature `d` over time `delta` to a
    /// likelihood vector: `(P m)_a = e^{-δλ} m_a + (1 - e^{-δλ}) qᵀm`.
    pub fn propagate(&self, d: usize, delta: f64, m: &DVector<f64>) -> DVector<f64> {
        let stay = (-delta * self.rates[d]).exp();
        let mix = (1.0 - stay) * self.equilibria[d].dot(m);
        m.map(|x| stay * x + mix)
    }
}

/// Transition probability matrix of feature `d` over a branch of length `delta`:
/// `e^{-δΛ_dd} I + (1 - e^{-δΛ_dd}) 1 q_dᵀ`. Rows sum to one.
pub fn discrete_transition_matrix(delta: f64, d: usize, kernel: &DiscreteKernel) -> Result<DMatrix<f64>> {
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("branch length must be non-negative, got {delta}")));
    }
    if d >= kernel.num_features() {
        return Err(Error::invalid(format!("feature {d} out of range")));
    }
    let q = kernel.equilibrium(d);
    let n = q.len();
    let stay = (-delta * kernel.rate(d)).exp();
    let mut p = DMatrix::from_fn(n, n, |_, b| (1.0 - stay) * q[b]);
    for a in 0..n {
        p[(a, a)] += stay;
    }
    Ok(p)
}

/// One Brownian step: a draw from `N(parent, δΛ)`.
pub fn brownian_transition<R: Rng + ?Sized>(
    parent: &DVector<f64>,
    delta: f64,
    kernel: &DiffusionKernel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("branch length must be > 0, got {delta}")));
    }
    if parent.len() != kernel.dim() {
        return Err(Error::Dimension { expected: kernel.dim(), got: parent.len() });
    }
    Ok(brownian_step(parent, delta, &kernel.sqrt(), rng))
}

pub(crate) fn brownian_step<R: Rng + ?Sized>(
    parent: &DVector<f64>,
    delta: f64,
    sqrt_kernel: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(parent.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    parent + sqrt_kernel * z * delta.sqrt()
}

/// Root prior of the generative stories: mean `μ⁽⁰⁾` and the inverse-Wishart
/// scale `σ²I` with `D + 1` degrees of freedom for Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootPrior {
    pub mean: DVector<f64>,
    pub sigma2: f64,
}

impl RootPrior {
    pub fn new(mean: DVector<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::invalid("prior scale σ² must be > 0"));
        }
        Ok(RootPrior { mean, sigma2 })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn dof(&self) -> usize {
        self.dim() + 1
    }
}

/// Draw from an inverse-Wishart `IW(scale, dof)` via the Bartlett decomposition
/// of the matching Wishart on the inverse scale.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if dof < d {
        return Err(Error::invalid(format!("inverse-Wishart needs dof >= {d}")));
    }
    let inv_scale = linalg::spd_inverse(scale).ok_or_else(|| Error::invalid("inverse-Wishart scale is not SPD"))?;
    let l = linalg::cholesky(&inv_scale).ok_or_else(|| Error::invalid("inverse-Wishart scale is not SPD"))?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = rand_distr::ChiSquared::new((dof - i) as f64).map_err(|e| Error::invalid(e.to_string()))?;
        a[(i, i)] = rng.sample(chi).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = &l * a;
    let wishart = &la * la.transpose();
    linalg::spd_inverse(&wishart).ok_or_else(|| Error::numerical(0, "Wishart draw is singular"))
}

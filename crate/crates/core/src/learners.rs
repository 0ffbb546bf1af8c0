//! Per-task base learners: MAP weights under a Gaussian prior for linear and
//! logistic regression, and the Laplace posterior covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coalescent::{Covariance, GaussianMessage, InfoMessage};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Row-compressed design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    dim: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        SparseRows { dim, indptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    /// Appends a row given as `(feature, value)` pairs (0-based features).
    /// Zero values are dropped; indices are sorted.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) -> Result<()> {
        let mut row: Vec<(usize, f64)> = entries.iter().copied().filter(|&(_, v)| v != 0.0).collect();
        row.sort_by_key(|&(i, _)| i);
        for w in row.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::data(None, format!("feature {} repeated in one row", w[0].0 + 1)));
            }
        }
        if let Some(&(i, _)) = row.iter().find(|&&(i, _)| i >= self.dim) {
            return Err(Error::Dimension { expected: self.dim, got: i + 1 });
        }
        for (i, v) in row {
            self.indices.push(i);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
        Ok(())
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = SparseRows::new(m.ncols());
        for r in 0..m.nrows() {
            let entries: Vec<(usize, f64)> = (0..m.ncols()).map(|c| (c, m[(r, c)])).collect();
            out.push_row(&entries).expect("dense row is always valid");
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn row_dense(&self, r: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        for (i, x) in self.row(r) {
            v[i] = x;
        }
        v
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.dim);
        for r in 0..self.nrows() {
            for (i, x) in self.row(r) {
                m[(r, i)] = x;
            }
        }
        m
    }

    pub fn row_dot(&self, r: usize, w: &DVector<f64>) -> f64 {
        self.row(r).map(|(i, x)| x * w[i]).sum()
    }

    /// `X w`.
    pub fn mul_vec(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.nrows(), (0..self.nrows()).map(|r| self.row_dot(r, w)))
    }

    /// `Xᵀ v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (r, &c) in v.iter().enumerate() {
            if c != 0.0 {
                for (i, x) in self.row(r) {
                    out[i] += c * x;
                }
            }
        }
        out
    }

    /// `Xᵀ diag(a) X`, materialized dense.
    pub fn weighted_gram(&self, a: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let (s, e) = (self.indptr[r], self.indptr[r + 1]);
            for p in s..e {
                let (i, xi) = (self.indices[p], self.values[p] * ar);
                for q in s..e {
                    g[(i, self.indices[q])] += xi * self.values[q];
                }
            }
        }
        g
    }

    pub fn select_rows(&self, rows: &[usize]) -> SparseRows {
        let mut out = SparseRows::new(self.dim);
        for &r in rows {
            let entries: Vec<(usize, f64)> = self.row(r).collect();
            out.push_row(&entries).expect("rows of a valid matrix stay valid");
        }
        out
    }

    pub fn append(&mut self, other: &SparseRows) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: other.dim });
        }
        for r in 0..other.nrows() {
            let entries: Vec<(usize, f64)> = other.row(r).collect();
            self.push_row(&entries)?;
        }
        Ok(())
    }

    /// Applies `f` to every row, producing a matrix of a new width.
    pub fn map_rows<F: Fn(&mut dyn Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)>>(&self, dim: usize, f: F) -> Result<SparseRows> {
        let mut out = SparseRows::new(dim);
        for r in 0..self.nrows() {
            let entries = f(&mut self.row(r));
            out.push_row(&entries)?;
        }
        Ok(out)
    }
}

/// Labelled examples of a single task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub x: SparseRows,
    pub y: Vec<f64>,
    pub kind: TaskKind,
    pub task: usize,
}

impl TaskDataset {
    pub fn new(x: SparseRows, y: Vec<f64>, kind: TaskKind, task: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension { expected: x.nrows(), got: y.len() });
        }
        if kind == TaskKind::Classification && y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::data(None, "classification labels must be +1 or -1"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(None, "labels must be finite"));
        }
        Ok(TaskDataset { x, y, kind, task })
    }

    pub fn from_dense(x: &DMatrix<f64>, y: Vec<f64>, kind: TaskKind, task: usize) -> Result<Self> {
        Self::new(SparseRows::from_dense(x), y, kind, task)
    }

    pub fn empty(dim: usize, kind: TaskKind, task: usize) -> Self {
        TaskDataset { x: SparseRows::new(dim), y: Vec::new(), kind, task }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn subset(&self, rows: &[usize]) -> TaskDataset {
        TaskDataset { x: self.x.select_rows(rows), y: rows.iter().map(|&r| self.y[r]).collect(), kind: self.kind, task: self.task }
    }

    /// Concatenation of several datasets (all of the same kind and width).
    pub fn concat(parts: &[&TaskDataset], task: usize) -> Result<TaskDataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut x = SparseRows::new(first.dim());
        let mut y = Vec::new();
        for p in parts {
            if p.kind != first.kind {
                return Err(Error::invalid("cannot pool regression and classification tasks"));
            }
            x.append(&p.x)?;
            y.extend_from_slice(&p.y);
        }
        TaskDataset::new(x, y, first.kind, task)
    }
}

/// Gaussian prior on a weight vector; the precision is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl WeightPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension { expected: mean.len(), got: cov.nrows() });
        }
        let precision = linalg::spd_inverse(&cov).ok_or_else(|| Error::invalid("prior covariance must be positive definite"))?;
        Ok(WeightPrior { mean, cov, precision })
    }

    /// Prior with a precision computed by the caller, for covariances too
    /// badly scaled to invert directly.
    pub fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        for m in [&cov, &precision] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Dimension { expected: d, got: m.nrows() });
            }
        }
        if !linalg::all_finite_mat(&precision) || linalg::cholesky(&precision).is_none() {
            return Err(Error::invalid("prior precision must be positive definite"));
        }
        Ok(WeightPrior { mean, cov, precision })
    }

    /// `N(0, s·I)`.
    pub fn isotropic(d: usize, s: f64) -> Result<Self> {
        if !(s > 0.0) {
            return Err(Error::invalid("prior variance must be > 0"));
        }
        Ok(WeightPrior {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d) * s,
            precision: DMatrix::identity(d, d) / s,
        })
    }

    pub fn from_message(msg: &GaussianMessage) -> Result<Self> {
        Self::new(msg.mean.clone(), msg.var.to_full())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, w: &DVector<f64>) -> f64 {
        let diff = w - &self.mean;
        let logdet = linalg::log_det_spd(&self.cov).unwrap_or(f64::NAN);
        -0.5 * (diff.dot(&(&self.precision * &diff)) + logdet + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Per-task posterior summary: MAP weights and Laplace covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPosterior {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl WeightPosterior {
    pub fn as_message(&self) -> GaussianMessage {
        GaussianMessage { mean: self.mean.clone(), var: self.cov.clone() }
    }
}

/// Optimizer settings for [`map_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iter: 500, grad_tol: 1e-6 }
    }
}

fn check_dims(data: &TaskDataset, prior: &WeightPrior) -> Result<()> {
    if data.dim() != prior.dim() {
        return Err(Error::Dimension { expected: prior.dim(), got: data.dim() });
    }
    Ok(())
}

fn check_rho2(data: &TaskDataset, rho2: f64) -> Result<()> {
    if data.kind == TaskKind::Regression && !(rho2 > 0.0) {
        return Err(Error::invalid("observation noise ρ² must be > 0 for regression"));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Data log-likelihood at `w` (Gaussian with variance ρ², or logistic).
pub fn log_likelihood(data: &TaskDataset, w: &DVector<f64>, rho2: f64) -> f64 {
    let margins = data.x.mul_vec(w);
    match data.kind {
        TaskKind::Regression => {
            let c = -0.5 * (2.0 * std::f64::consts::PI * rho2).ln();
            margins.iter().zip(&data.y).map(|(m, y)| c - (y - m).powi(2) / (2.0 * rho2)).sum()
        }
        TaskKind::Classification => margins.iter().zip(&data.y).map(|(m, y)| -softplus(-y * m)).sum(),
    }
}

/// Unnormalized log posterior `log p(y|X,w) + log N(w; m, Σ)`.
pub fn log_posterior(data: &TaskDataset, w: &DVector<f64>, prior: &WeightPrior, rho2: f64) -> f64 {
    log_likelihood(data, w, rho2) + prior.log_density(w)
}

/// Gradient of the data log-likelihood.
pub fn log_likelihood_grad(data: &TaskDataset, w: &DVector<f64>, rho2: f64) -> DVector<f64> {
    let margins = data.x.mul_vec(w);
    let coef: Vec<f64> = match data.kind {
        TaskKind::Regression => margins.iter().zip(&data.y).map(|(m, y)| (y - m) / rho2).collect(),
        TaskKind::Classification => margins.iter().zip(&data.y).map(|(m, y)| y * sigmoid(-y * m)).collect(),
    };
    data.x.tr_mul_vec(&coef)
}

/// Gradient of [`log_posterior`].
pub fn log_posterior_grad(data: &TaskDataset, w: &DVector<f64>, prior: &WeightPrior, rho2: f64) -> DVector<f64> {
    log_likelihood_grad(data, w, rho2) - prior.precision() * (w - prior.mean())
}

/// Per-example curvature weights `A_nn`: 1/ρ² for regression, `s(1-s)` for logistic.
fn curvature_weights(data: &TaskDataset, w: &DVector<f64>, rho2: f64) -> Vec<f64> {
    match data.kind {
        TaskKind::Regression => vec![1.0 / rho2; data.len()],
        TaskKind::Classification => data
            .x
            .mul_vec(w)
            .iter()
            .map(|&m| {
                let s = sigmoid(m);
                s * (1.0 - s)
            })
            .collect(),
    }
}

/// MAP weights. Regression solves the normal equations directly; logistic
/// regression uses preconditioned Polak–Ribière conjugate gradient.
pub fn map_weights(data: &TaskDataset, prior: &WeightPrior, rho2: f64) -> Result<DVector<f64>> {
    map_weights_with(data, prior, rho2, &SolverOptions::default())
}

pub fn map_weights_with(data: &TaskDataset, prior: &WeightPrior, rho2: f64, opts: &SolverOptions) -> Result<DVector<f64>> {
    check_dims(data, prior)?;
    check_rho2(data, rho2)?;
    if data.is_empty() {
        return Ok(prior.mean().clone());
    }
    match data.kind {
        TaskKind::Regression => {
            let h = data.x.weighted_gram(&vec![1.0 / rho2; data.len()]) + prior.precision();
            let rhs = data.x.tr_mul_vec(&data.y.iter().map(|y| y / rho2).collect::<Vec<_>>())
                + prior.precision() * prior.mean();
            let chol = linalg::cholesky(&h).ok_or_else(|| Error::numerical(data.task, "regression Hessian is singular"))?;
            Ok(chol.solve(&rhs))
        }
        TaskKind::Classification => logistic_cg(data, prior, opts),
    }
}

enum Preconditioner {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Diagonal(DVector<f64>),
}

impl Preconditioner {
    fn apply(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            Preconditioner::Dense(c) => c.solve(g),
            Preconditioner::Diagonal(d) => g.component_div(d),
        }
    }
}

fn logistic_cg(data: &TaskDataset, prior: &WeightPrior, opts: &SolverOptions) -> Result<DVector<f64>> {
    let d = data.dim();
    // Böhning's bound 0.25·XᵀX + P dominates the Hessian everywhere.
    let bound = data.x.weighted_gram(&vec![0.25; data.len()]) + prior.precision();
    let precond = if d <= 2000 {
        match linalg::cholesky(&bound) {
            Some(c) => Preconditioner::Dense(c),
            None => Preconditioner::Diagonal(bound.diagonal()),
        }
    } else {
        Preconditioner::Diagonal(bound.diagonal())
    };

    let neg_grad = |w: &DVector<f64>| -log_posterior_grad(data, w, prior, 1.0);
    let mut w = prior.mean().clone();
    let mut g = neg_grad(&w);
    let mut z = precond.apply(&g);
    let mut dir = -&z;
    let mut gz_prev = g.dot(&z);
    for iter in 0..opts.max_iter {
        if g.norm() <= opts.grad_tol * w.norm().max(1.0) {
            return Ok(w);
        }
        if g.dot(&dir) >= 0.0 {
            dir = -&z;
        }
        let alpha = line_search(data, prior, &w, &dir);
        w += &dir * alpha;
        let g_new = neg_grad(&w);
        let z_new = precond.apply(&g_new);
        let gz_new = g_new.dot(&z_new);
        let beta = ((gz_new - z_new.dot(&g)) / gz_prev).max(0.0);
        // periodic restart keeps conjugacy honest on long runs
        dir = if (iter + 1) % d.max(1) == 0 { -&z_new } else { -&z_new + &dir * beta };
        g = g_new;
        z = z_new;
        gz_prev = gz_new;
    }
    // CG stalls on badly conditioned posteriors (weak prior, nearly separable
    // data); finish with Newton steps when the Hessian is small enough to factor.
    if d <= 2000 {
        for _ in 0..100 {
            if g.norm() <= opts.grad_tol * w.norm().max(1.0) {
                return Ok(w);
            }
            let Some(chol) = linalg::cholesky(&neg_hessian(data, &w, prior, 1.0)) else { break };
            let dir = -chol.solve(&g);
            let alpha = line_search(data, prior, &w, &dir);
            if alpha == 0.0 {
                break;
            }
            w += &dir * alpha;
            g = neg_grad(&w);
        }
    }
    let grad_norm = g.norm();
    if grad_norm <= opts.grad_tol * w.norm().max(1.0) {
        Ok(w)
    } else {
        Err(Error::NoConvergence { iterations: opts.max_iter, grad_norm })
    }
}

/// Step length along `dir` for the negative log posterior. The objective is
/// convex along the line, so this runs safeguarded Newton on its directional
/// derivative, starting at the full Newton step and backtracking into the
/// bracket when a step overshoots.
fn line_search(data: &TaskDataset, prior: &WeightPrior, w: &DVector<f64>, dir: &DVector<f64>) -> f64 {
    let margins = data.x.mul_vec(w);
    let slopes = data.x.mul_vec(dir);
    let p_dir = prior.precision() * dir;
    let base = w - prior.mean();
    let dpd = dir.dot(&p_dir);
    let dpb = p_dir.dot(&base);
    let derivs = |a: f64| -> (f64, f64) {
        let mut d1 = dpb + a * dpd;
        let mut d2 = dpd;
        for ((m, s), y) in margins.iter().zip(slopes.iter()).zip(&data.y) {
            let z = m + a * s;
            d1 -= y * sigmoid(-y * z) * s;
            let p = sigmoid(z);
            d2 += p * (1.0 - p) * s * s;
        }
        (d1, d2)
    };
    let (d0, h0) = derivs(0.0);
    if !(d0 < 0.0) || !(h0 > 0.0) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut a = -d0 / h0;
    for _ in 0..30 {
        let (d1, d2) = derivs(a);
        if d1.abs() <= 1e-10 * d0.abs() {
            return a;
        }
        if d1 < 0.0 {
            lo = a;
        } else {
            hi = a;
        }
        let mut next = a - d1 / d2;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * a.max(lo) };
        }
        a = next;
    }
    a
}

/// Laplace covariance at `w`: `(XᵀAX/ρ² + Σ₀⁻¹)⁻¹` for regression and
/// `(XᵀAX + Σ₀⁻¹)⁻¹` with `A_nn = s_n(1 - s_n)` for logistic regression.
pub fn laplace_covariance(data: &TaskDataset, w: &DVector<f64>, prior: &WeightPrior, rho2: f64) -> Result<DMatrix<f64>> {
    check_dims(data, prior)?;
    check_rho2(data, rho2)?;
    let h = neg_hessian(data, w, prior, rho2);
    let (cov, jittered) = linalg::spd_inverse_jitter(&h)
        .ok_or_else(|| Error::numerical(data.task, "posterior Hessian is singular even after jitter"))?;
    if jittered {
        log::warn!("task {}: singular posterior Hessian, added 1e-8·I", data.task);
    }
    Ok(cov)
}

/// Negative Hessian of the log posterior at `w`.
pub fn neg_hessian(data: &TaskDataset, w: &DVector<f64>, prior: &WeightPrior, rho2: f64) -> DMatrix<f64> {
    data.x.weighted_gram(&curvature_weights(data, w, rho2)) + prior.precision()
}

/// MAP weights and Laplace covariance together.
pub fn weight_posterior(data: &TaskDataset, prior: &WeightPrior, rho2: f64) -> Result<WeightPosterior> {
    let mean = map_weights(data, prior, rho2)?;
    let cov = laplace_covariance(data, &mean, prior, rho2)?;
    Ok(WeightPosterior { mean, cov: Covariance::Full(cov) })
}

/// Likelihood of the task's data as information-form evidence on `w`. Exact
/// for regression; for logistic regression, the quadratic expansion at `w`.
pub fn likelihood_evidence(data: &TaskDataset, w: &DVector<f64>, rho2: f64) -> InfoMessage {
    let precision = data.x.weighted_gram(&curvature_weights(data, w, rho2));
    let shift = match data.kind {
        TaskKind::Regression => data.x.tr_mul_vec(&data.y.iter().map(|y| y / rho2).collect::<Vec<_>>()),
        TaskKind::Classification => &precision * w + log_likelihood_grad(data, w, rho2),
    };
    InfoMessage { precision, shift }
}

/// Laplace approximation of the log marginal likelihood `log ∫ p(y|X,w) N(w; m, Σ₀) dw`.
pub fn laplace_log_evidence(data: &TaskDataset, prior: &WeightPrior, rho2: f64) -> Result<f64> {
    let w = map_weights(data, prior, rho2)?;
    let h = neg_hessian(data, &w, prior, rho2);
    let logdet = linalg::log_det_spd(&h).ok_or_else(|| Error::numerical(data.task, "posterior Hessian is not SPD"))?;
    let d = data.dim() as f64;
    Ok(log_posterior(data, &w, prior, rho2) + 0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_task(rng: &mut ChaCha8Rng, n: usize, d: usize, kind: TaskKind) -> TaskDataset {
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|r| {
                let m = x.row(r).transpose().dot(&w);
                match kind {
                    TaskKind::Regression => m + 0.3 * rng.sample::<f64, _>(StandardNormal),
                    TaskKind::Classification => {
                        if rng.random::<f64>() < sigmoid(m) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                }
            })
            .collect();
        TaskDataset::from_dense(&x, y, kind, 0).unwrap()
    }

    #[test]
    fn empty_data_returns_prior_mean() {
        let data = TaskDataset::empty(3, TaskKind::Classification, 0);
        let prior = WeightPrior::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), DMatrix::identity(3, 3)).unwrap();
        assert_eq!(map_weights(&data, &prior, 1.0).unwrap(), *prior.mean());
    }

    #[test]
    fn scalar_ridge() {
        let data = TaskDataset::from_dense(&DMatrix::from_element(1, 1, 1.0), vec![2.0], TaskKind::Regression, 0).unwrap();
        let prior = WeightPrior::isotropic(1, 1.0).unwrap();
        let w = map_weights(&data, &prior, 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15);
        let c = laplace_covariance(&data, &w, &prior, 1.0).unwrap();
        assert!((c[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logistic_at_zero_has_quarter_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_task(&mut rng, 5, 2, TaskKind::Classification);
        let a = curvature_weights(&data, &DVector::zeros(2), 1.0);
        assert!(a.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn logistic_map_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in 1..6 {
            let data = random_task(&mut rng, 40, d, TaskKind::Classification);
            let prior = WeightPrior::isotropic(d, 2.0).unwrap();
            let w = map_weights(&data, &prior, 1.0).unwrap();
            let g = log_posterior_grad(&data, &w, &prior, 1.0);
            assert!(g.norm() <= 1e-6 * w.norm().max(1.0));
            // central differences of the objective agree with zero
            let h = 1e-5;
            for j in 0..d {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let fd = (log_posterior(&data, &wp, &prior, 1.0) - log_posterior(&data, &wm, &prior, 1.0)) / (2.0 * h);
                assert!(fd.abs() < 1e-5, "fd gradient {fd}");
            }
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let x = DMatrix::from_element(1, 1, 1.0);
        assert!(TaskDataset::from_dense(&x, vec![0.5], TaskKind::Classification, 0).is_err());
        assert!(TaskDataset::from_dense(&x, vec![0.5, 1.0], TaskKind::Regression, 0).is_err());
    }

    #[test]
    fn regression_evidence_matches_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_task(&mut rng, 10, 3, TaskKind::Regression);
        let ev = likelihood_evidence(&data, &DVector::zeros(3), 0.5);
        let x = data.x.to_dense();
        assert!((ev.precision - x.transpose() * &x / 0.5).amax() < 1e-12);
    }

    #[test]
    fn sparse_ops_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_task(&mut rng, 7, 4, TaskKind::Regression);
        let x = data.x.to_dense();
        let w = DVector::from_vec(vec![0.1, -0.3, 2.0, 1.0]);
        assert!((data.x.mul_vec(&w) - &x * &w).amax() < 1e-12);
        let a: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let g = data.x.weighted_gram(&a);
        let expected = x.transpose() * DMatrix::from_diagonal(&DVector::from_vec(a.clone())) * &x;
        assert!((g - expected).amax() < 1e-12);
    }
}

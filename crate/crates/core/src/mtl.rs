//! Multitask learning: tasks share a correlation matrix R, and the diagonal
//! log standard deviations S of their weight priors diffuse down a
//! coalescent tree.
//!
//! Fitting is hard EM. Per task, w is set to its MAP value under
//! `N(0, e^S R e^S)` and then S is moved uphill on its log-posterior given the
//! tree-induced prior. The M-step rebuilds the tree over the S estimates,
//! refits the diffusion covariance Λ and refits R.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalescent::{greedy_rate1, info_posteriors, leaf_cavities, posterior_marginals, CoalescentTree, Covariance, GaussianMessage, InfoMessage};
use crate::diffusion::{normalize_correlation, scaled_covariance, DiffusionKernel};
use crate::error::{Error, Result};
use crate::fit::{self, Prediction};
use crate::learners::{weight_posterior, TaskDataset, TaskKind, WeightPosterior, WeightPrior};
use crate::linalg;

/// Symmetric PSD matrix with an exactly unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct CorrelationMatrix(DMatrix<f64>);

impl CorrelationMatrix {
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        let d = r.nrows();
        if r.ncols() != d {
            return Err(Error::Dimension { expected: d, got: r.ncols() });
        }
        if (0..d).any(|i| r[(i, i)] != 1.0) {
            return Err(Error::invalid("correlation matrix needs a unit diagonal"));
        }
        if !linalg::all_finite_mat(&r) || r.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::invalid("correlations must lie in [-1, 1]"));
        }
        if (&r - r.transpose()).amax() > 1e-12 || linalg::min_eigenvalue(&r) < -1e-10 {
            return Err(Error::invalid("correlation matrix must be symmetric PSD"));
        }
        Ok(CorrelationMatrix(linalg::symmetrize(&r)))
    }

    pub fn identity(d: usize) -> Self {
        CorrelationMatrix(DMatrix::identity(d, d))
    }

    /// `diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}` of a positive-definite covariance.
    pub fn from_covariance(sigma: &DMatrix<f64>) -> Result<Self> {
        if sigma.diagonal().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::numerical(0, "covariance has a non-positive variance"));
        }
        let mut r = normalize_correlation(sigma);
        r.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(CorrelationMatrix(r))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.0).ok_or_else(|| Error::numerical(0, "correlation matrix is singular"))
    }

    /// Diagonal of `R⁻¹`.
    pub fn inverse_diagonal(&self) -> Result<DVector<f64>> {
        self.inverse().map(|m| m.diagonal())
    }
}

impl TryFrom<DMatrix<f64>> for CorrelationMatrix {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        CorrelationMatrix::new(m)
    }
}

impl From<CorrelationMatrix> for DMatrix<f64> {
    fn from(r: CorrelationMatrix) -> Self {
        r.0
    }
}

/// Unnormalized log density of the marginally-uniform correlation prior:
/// `a·log det R − (D+1)/2 · Σ_i log det R_(ii)` with `a = (D+1)(D−1)/2 − 1`
/// and `R_(ii)` the matrix with row and column `i` removed. Singular R gives −∞.
pub fn correlation_log_prior(r: &CorrelationMatrix) -> f64 {
    let d = r.dim();
    if d <= 1 {
        return 0.0;
    }
    let df = d as f64;
    let Some(ld) = linalg::log_det_spd(r.matrix()) else {
        return f64::NEG_INFINITY;
    };
    let mut minors = 0.0;
    for i in 0..d {
        let sub = r.matrix().clone().remove_row(i).remove_column(i);
        match linalg::log_det_spd(&sub) {
            Some(v) => minors += v,
            None => return f64::NEG_INFINITY,
        }
    }
    (0.5 * (df + 1.0) * (df - 1.0) - 1.0) * ld - 0.5 * (df + 1.0) * minors
}

/// The log-posterior of S in its diagonal pieces. Every term is separable
/// across coordinates:
/// `f_j(s) = −s − ½ λ_j (s − p_j)² − ½ c_j e^{−2s}` with `λ_j = (Λ⁻¹)_jj` and
/// `c_j = w_j² (R⁻¹)_jj`.
#[derive(Debug, Clone)]
struct SObjective {
    p: DVector<f64>,
    lam_inv: DVector<f64>,
    c: DVector<f64>,
}

impl SObjective {
    fn new(p: &DVector<f64>, lam: &DMatrix<f64>, r: &DMatrix<f64>, w: &DVector<f64>) -> Result<Self> {
        let d = p.len();
        for m in [lam, r] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Dimension { expected: d, got: m.nrows() });
            }
        }
        if w.len() != d {
            return Err(Error::Dimension { expected: d, got: w.len() });
        }
        let lam_inv = linalg::spd_inverse(lam).ok_or_else(|| Error::numerical(0, "Λ is not invertible"))?.diagonal();
        let r_inv = linalg::spd_inverse(r).ok_or_else(|| Error::numerical(0, "R is not invertible"))?.diagonal();
        let c = DVector::from_fn(d, |j, _| w[j] * w[j] * r_inv[j]);
        Ok(SObjective { p: p.clone(), lam_inv, c })
    }

    fn term(&self, j: usize, s: f64) -> f64 {
        let a = s - self.p[j];
        -s - 0.5 * self.lam_inv[j] * a * a - 0.5 * self.c[j] * (-2.0 * s).exp()
    }

    fn deriv(&self, j: usize, s: f64) -> f64 {
        -1.0 - self.lam_inv[j] * (s - self.p[j]) + self.c[j] * (-2.0 * s).exp()
    }

    /// `−f_j''(s) = λ_j + 2 c_j e^{−2s}`, always positive.
    fn curvature(&self, j: usize, s: f64) -> f64 {
        self.lam_inv[j] + 2.0 * self.c[j] * (-2.0 * s).exp()
    }

    fn value(&self, s: &DVector<f64>) -> f64 {
        (0..s.len()).map(|j| self.term(j, s[j])).sum()
    }

    fn grad(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(s.len(), |j, _| self.deriv(j, s[j]))
    }
}

/// `−tr S − ½ tr((S−P)Λ⁻¹(S−P)) − ½ tr(W e^{−S} R⁻¹ e^{−S} W)` with
/// `W = diag(w)`, dropping the constant.
pub fn s_log_posterior(s: &DVector<f64>, p: &DVector<f64>, lam: &DMatrix<f64>, r: &DMatrix<f64>, w: &DVector<f64>) -> Result<f64> {
    check_len(s, p)?;
    Ok(SObjective::new(p, lam, r, w)?.value(s))
}

/// Diagonal of `−I − (S−P)Λ⁻¹ + W e^{−S} R⁻¹ e^{−S} W`.
pub fn s_grad(s: &DVector<f64>, p: &DVector<f64>, lam: &DMatrix<f64>, r: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(s, p)?;
    Ok(SObjective::new(p, lam, r, w)?.grad(s))
}

fn check_len(s: &DVector<f64>, p: &DVector<f64>) -> Result<()> {
    if s.len() != p.len() {
        return Err(Error::Dimension { expected: p.len(), got: s.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SOptions {
    /// Initial step size of the ascent.
    pub step: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SOptions {
    fn default() -> Self {
        SOptions { step: 0.1, tol: 1e-6, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SOptimum {
    pub s: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every iteration, starting with the value at `S₀`.
    pub trace: Vec<f64>,
}

/// Gradient ascent on [`s_log_posterior`] from `s0`. Because the objective
/// separates over coordinates, every coordinate keeps its own step: it starts
/// at `opts.step` and is halved whenever a proposed move would lower that
/// coordinate's term, so the total objective never decreases. Each
/// coordinate's gradient is scaled by its inverse curvature; the `e^{−2s}`
/// term makes raw gradients span many orders of magnitude. Stops when the
/// largest proposed move is below `opts.tol`.
pub fn optimize_s(
    s0: &DVector<f64>,
    p: &DVector<f64>,
    lam: &DMatrix<f64>,
    r: &DMatrix<f64>,
    w: &DVector<f64>,
    opts: &SOptions,
) -> Result<SOptimum> {
    check_len(s0, p)?;
    let obj = SObjective::new(p, lam, r, w)?;
    Ok(ascend(&obj, s0, opts))
}

fn ascend(obj: &SObjective, s0: &DVector<f64>, opts: &SOptions) -> SOptimum {
    let d = s0.len();
    let mut s = s0.clone();
    let mut steps = vec![opts.step; d];
    let mut trace = vec![obj.value(&s)];
    for it in 1..=opts.max_iter {
        let mut largest: f64 = 0.0;
        for j in 0..d {
            let delta = steps[j] * obj.deriv(j, s[j]) / obj.curvature(j, s[j]);
            largest = largest.max(delta.abs());
            if delta.abs() < opts.tol {
                continue;
            }
            let cand = s[j] + delta;
            if obj.term(j, cand) >= obj.term(j, s[j]) {
                s[j] = cand;
            } else {
                steps[j] *= 0.5;
            }
        }
        if largest < opts.tol {
            return SOptimum { s, iterations: it, converged: true, trace };
        }
        trace.push(obj.value(&s));
    }
    log::warn!("log-std ascent stopped at the iteration cap ({})", opts.max_iter);
    SOptimum { s, iterations: opts.max_iter, converged: false, trace }
}

/// Correlation of `I + Σ_k u_k u_kᵀ` with `u_k = e^{−S_k} w_k`: the scatter of
/// the whitened weights under the inverse-Wishart mode, rescaled to a unit
/// diagonal (the mode's scale factor cancels).
pub fn r_update(log_std: &[DVector<f64>], weights: &[DVector<f64>]) -> Result<CorrelationMatrix> {
    let d = weights.first().map(|w| w.len()).ok_or_else(|| Error::invalid("no tasks"))?;
    if log_std.len() != weights.len() {
        return Err(Error::Dimension { expected: weights.len(), got: log_std.len() });
    }
    let mut sigma = DMatrix::identity(d, d);
    for (s, w) in log_std.iter().zip(weights) {
        if s.len() != d || w.len() != d {
            return Err(Error::Dimension { expected: d, got: s.len().min(w.len()) });
        }
        let u = DVector::from_fn(d, |j, _| (-s[j]).exp() * w[j]);
        sigma += &u * u.transpose();
    }
    CorrelationMatrix::from_covariance(&linalg::symmetrize(&sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MtlVariant {
    Diag,
    Full,
}

impl MtlVariant {
    pub fn full_kernel(self) -> bool {
        self == MtlVariant::Full
    }
}

impl fmt::Display for MtlVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MtlVariant::Diag => "diag",
            MtlVariant::Full => "full",
        })
    }
}

impl FromStr for MtlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diag" => Ok(MtlVariant::Diag),
            "full" => Ok(MtlVariant::Full),
            _ => Err(Error::invalid(format!("unknown multitask variant '{s}' (expected diag or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlConfig {
    pub variant: MtlVariant,
    /// Root prior `N(0, σ²I)` of S and the initial Λ.
    pub sigma2: f64,
    pub rho2: f64,
    pub max_iters: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Keep S at zero everywhere.
    #[serde(default)]
    pub fix_s: bool,
    /// Keep R at the identity.
    #[serde(default)]
    pub fix_r: bool,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            variant: MtlVariant::Diag,
            sigma2: 1.0,
            rho2: 1.0,
            max_iters: 20,
            heldout_fraction: 0.1,
            seed: 0,
            fix_s: false,
            fix_r: false,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid("σ² must be finite and > 0"));
        }
        if !(self.rho2 > 0.0) || !self.rho2.is_finite() {
            return Err(Error::invalid("ρ² must be finite and > 0"));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::invalid("held-out fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    fn diag(&self) -> bool {
        !self.variant.full_kernel()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlModelState {
    pub config: MtlConfig,
    pub kind: TaskKind,
    pub dim: usize,
    #[serde(with = "crate::fit::tree_serde")]
    pub tree: CoalescentTree,
    /// Diffusion covariance of S along the tree.
    pub kernel: DiffusionKernel,
    pub correlation: CorrelationMatrix,
    /// Per task: current S (diagonal, as a vector).
    pub log_std: Vec<DVector<f64>>,
    /// Per task: Gaussian over S used as the tree leaf message.
    pub s_messages: Vec<GaussianMessage>,
    /// Posterior over S at every tree node.
    pub node_marginals: Vec<GaussianMessage>,
    pub posteriors: Vec<WeightPosterior>,
    pub trace: Vec<f64>,
    pub selected_iteration: usize,
    /// EM iterations completed.
    pub iteration: usize,
}

impl MtlModelState {
    pub fn num_tasks(&self) -> usize {
        self.posteriors.len()
    }

    pub fn weights(&self, task: usize) -> &DVector<f64> {
        &self.posteriors[task].mean
    }

    fn root_prior(&self) -> GaussianMessage {
        fit::isotropic_message(self.dim, self.config.sigma2, self.config.diag())
    }
}

/// Weight posterior under `N(0, e^S R e^S)`. The prior precision is formed as
/// `e^{−S} R⁻¹ e^{−S}` so that widely spread scales stay well conditioned.
fn w_posterior(task: &TaskDataset, s: &DVector<f64>, r: &CorrelationMatrix, rho2: f64) -> Result<WeightPosterior> {
    let e_inv = s.map(|v| (-v).exp());
    let r_inv = r.inverse()?;
    let precision = DMatrix::from_fn(s.len(), s.len(), |i, j| e_inv[i] * r_inv[(i, j)] * e_inv[j]);
    let prior = WeightPrior::from_parts(DVector::zeros(s.len()), scaled_covariance(s, r.matrix()), linalg::symmetrize(&precision))?;
    weight_posterior(task, &prior, rho2)
}

/// Curvature of the likelihood part of the S objective: `2 c_j e^{−2 s_j}`.
fn s_curvature(obj: &SObjective, s: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(s.len(), |j, _| 2.0 * obj.c[j] * (-2.0 * s[j]).exp())
}

/// Laplace Gaussian over S: prior precision `V⁻¹` plus the likelihood curvature.
fn s_message(s: &DVector<f64>, prior_cov: &DMatrix<f64>, curvature: &DVector<f64>, diag: bool) -> Result<GaussianMessage> {
    let mut prec = linalg::spd_inverse(prior_cov).ok_or_else(|| Error::numerical(0, "S prior is singular"))?;
    for j in 0..s.len() {
        prec[(j, j)] += curvature[j];
    }
    let cov = linalg::spd_inverse(&prec).ok_or_else(|| Error::numerical(0, "S posterior precision is singular"))?;
    let var = if diag { Covariance::Diag(cov.diagonal()) } else { Covariance::Full(linalg::symmetrize(&cov)) };
    Ok(GaussianMessage { mean: s.clone(), var })
}

/// Likelihood evidence about each task's S in information form, expanded
/// around the current S: `J = diag(2c e^{−2s})`, `h = J s + c e^{−2s} − 1`.
fn s_evidence(log_std: &[DVector<f64>], posteriors: &[WeightPosterior], r: &CorrelationMatrix) -> Result<Vec<InfoMessage>> {
    let r_inv = r.inverse_diagonal()?;
    Ok(log_std
        .iter()
        .zip(posteriors)
        .map(|(s, p)| {
            let d = s.len();
            let mut precision = DMatrix::zeros(d, d);
            let mut shift = DVector::zeros(d);
            for j in 0..d {
                let c = p.mean[j] * p.mean[j] * r_inv[j] * (-2.0 * s[j]).exp();
                precision[(j, j)] = 2.0 * c;
                shift[j] = 2.0 * c * s[j] + (c - 1.0);
            }
            InfoMessage { precision, shift }
        })
        .collect())
}

/// S = 0, R = I and independent MAP weights under `N(0, I)`. The initial tree
/// is built over independent S estimates (prior `N(0, σ²I)` for each task).
pub fn mtl_init(tasks: &[TaskDataset], config: &MtlConfig) -> Result<MtlModelState> {
    config.validate()?;
    if tasks.len() < 2 {
        return Err(Error::invalid("at least two tasks are required"));
    }
    let (d, kind) = fit::common_shape(tasks)?;
    let r = CorrelationMatrix::identity(d);
    let zero = DVector::zeros(d);
    let posteriors = tasks
        .par_iter()
        .map(|t| w_posterior(t, &zero, &r, config.rho2))
        .collect::<Result<Vec<_>>>()?;
    let prior_cov = DMatrix::identity(d, d) * config.sigma2;
    let s_messages = if config.fix_s {
        vec![GaussianMessage { mean: zero.clone(), var: fit::isotropic_message(d, config.sigma2, config.diag()).var }; tasks.len()]
    } else {
        posteriors
            .par_iter()
            .map(|p| {
                let obj = SObjective::new(&zero, &prior_cov, r.matrix(), &p.mean)?;
                let s = ascend(&obj, &zero, &SOptions::default()).s;
                s_message(&s, &prior_cov, &s_curvature(&obj, &s), config.diag())
            })
            .collect::<Result<Vec<_>>>()?
    };
    let kernel = fit::isotropic_kernel(d, config.sigma2, config.diag())?;
    let tree = greedy_rate1(&s_messages, &kernel)?;
    let root = fit::isotropic_message(d, config.sigma2, config.diag());
    let node_marginals = posterior_marginals(&tree, &s_messages, &kernel, Some(&root))?;
    Ok(MtlModelState {
        config: config.clone(),
        kind,
        dim: d,
        tree,
        kernel,
        correlation: r,
        log_std: vec![zero; tasks.len()],
        s_messages,
        node_marginals,
        posteriors,
        trace: Vec::new(),
        selected_iteration: 0,
        iteration: 0,
    })
}

/// Hard E-step: w given S, then S given w and its tree-induced prior, once
/// each per task. The S step size is `0.1 / iteration`.
pub fn mtl_e_step(state: &MtlModelState, tasks: &[TaskDataset]) -> Result<MtlModelState> {
    if tasks.len() != state.num_tasks() {
        return Err(Error::Dimension { expected: state.num_tasks(), got: tasks.len() });
    }
    let cfg = &state.config;
    let r = &state.correlation;
    let posteriors = tasks
        .par_iter()
        .zip(&state.log_std)
        .map(|(t, s)| w_posterior(t, s, r, cfg.rho2))
        .collect::<Result<Vec<_>>>()?;
    if cfg.fix_s {
        return Ok(MtlModelState { posteriors, iteration: state.iteration + 1, ..state.clone() });
    }

    let evidence = s_evidence(&state.log_std, &posteriors, r)?;
    let cavities = leaf_cavities(&state.tree, &evidence, &state.kernel, Some(&state.root_prior()))?;
    let iteration = state.iteration + 1;
    let opts = SOptions { step: 0.1 / iteration as f64, ..SOptions::default() };
    let own_prior = DMatrix::identity(state.dim, state.dim) * cfg.sigma2;
    let updated = state
        .log_std
        .par_iter()
        .zip(&posteriors)
        .zip(&cavities)
        .map(|((s, p), cav)| {
            let v = cav.var.to_full();
            let obj = SObjective::new(&cav.mean, &v, r.matrix(), &p.mean)?;
            let s_new = ascend(&obj, s, &opts).s;
            let msg = s_message(&s_new, &own_prior, &s_curvature(&obj, &s_new), cfg.diag())?;
            Ok((s_new, msg))
        })
        .collect::<Result<Vec<_>>>()?;
    let (log_std, s_messages) = updated.into_iter().unzip();
    Ok(MtlModelState { posteriors, log_std, s_messages, iteration, ..state.clone() })
}

/// M-step: tree over the leaf S messages (each task's own evidence under the
/// root prior), S marginals at every node given all evidence, Λ at the
/// inverse-Wishart mode, and R from the whitened weights.
pub fn mtl_m_step(state: &MtlModelState) -> Result<MtlModelState> {
    let cfg = &state.config;
    let mut next = state.clone();
    if !cfg.fix_s {
        next.tree = greedy_rate1(&state.s_messages, &state.kernel)?;
        let evidence = s_evidence(&state.log_std, &state.posteriors, &state.correlation)?;
        next.node_marginals = info_posteriors(&next.tree, &evidence, &state.kernel, Some(&state.root_prior()))?;
        if cfg.diag() {
            next.node_marginals.iter_mut().for_each(|m| m.var = m.var.to_diag());
        }
        next.kernel = fit::diffusion_update(&next.tree, &next.node_marginals, &state.kernel, cfg.diag())?;
    }
    if !cfg.fix_r {
        let ws: Vec<DVector<f64>> = state.posteriors.iter().map(|p| p.mean.clone()).collect();
        next.correlation = r_update(&state.log_std, &ws)?;
    }
    Ok(next)
}

/// Hard EM with held-out selection, as for the domain-adaptation model.
pub fn mtl_fit(tasks: &[TaskDataset], config: &MtlConfig) -> Result<MtlModelState> {
    config.validate()?;
    fit::common_shape(tasks)?;
    let (train, held) = fit::split_heldout(tasks, config.heldout_fraction, config.seed);
    let have_heldout = held.iter().any(|t| !t.is_empty());
    let score = |s: &MtlModelState| {
        let ws: Vec<&DVector<f64>> = s.posteriors.iter().map(|p| &p.mean).collect();
        fit::heldout_log_likelihood(&held, &ws, config.rho2)
    };

    let mut state = mtl_init(&train, config)?;
    let mut trace = vec![score(&state)];
    let mut history = vec![state.clone()];
    for it in 1..=config.max_iters {
        state = mtl_m_step(&mtl_e_step(&state, &train)?)?;
        trace.push(score(&state));
        log::info!("EM iteration {it}: held-out log-likelihood {:.6}", trace[it]);
        history.push(state.clone());
    }
    let best = fit::select_iteration(&trace, have_heldout);
    let mut out = history.swap_remove(best);
    out.trace = trace;
    out.selected_iteration = best;
    Ok(out)
}

pub fn mtl_predict(state: &MtlModelState, task: usize, x: &DVector<f64>) -> Result<Prediction> {
    let w = state
        .posteriors
        .get(task)
        .ok_or_else(|| Error::invalid(format!("task {task} out of range (model has {})", state.num_tasks())))?;
    fit::predict_linear(&w.mean, state.kind, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    fn one() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    #[test]
    fn prior_scalar_values() {
        assert_eq!(correlation_log_prior(&CorrelationMatrix::identity(1)), 0.0);
        assert_eq!(correlation_log_prior(&CorrelationMatrix::identity(2)), 0.0);
        let r = CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        assert!((correlation_log_prior(&r) - 0.5 * 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn objective_scalar_values() {
        let f = s_log_posterior(&v(&[1.0]), &v(&[0.0]), &one(), &one(), &v(&[1.0])).unwrap();
        assert!((f - (-1.5 - 0.5 * (-2.0f64).exp())).abs() < 1e-14);
        let g = s_grad(&v(&[1.0]), &v(&[0.0]), &one(), &one(), &v(&[1.0])).unwrap();
        assert!((g[0] - (-2.0 + (-2.0f64).exp())).abs() < 1e-14);
        let z = DVector::zeros(3);
        let i3 = DMatrix::identity(3, 3);
        assert_eq!(s_log_posterior(&z, &z, &i3, &i3, &z).unwrap(), 0.0);
        assert_eq!(s_grad(&z, &z, &i3, &i3, &z).unwrap(), v(&[-1.0, -1.0, -1.0]));
    }

    #[test]
    fn zero_weight_optimum() {
        let lam = DMatrix::from_element(1, 1, 0.7);
        let out = optimize_s(&v(&[0.3]), &v(&[0.3]), &lam, &one(), &v(&[0.0]), &SOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.s[0] - (0.3 - 0.7)).abs() < 1e-4);
    }

    #[test]
    fn stationary_start_returns_immediately() {
        // −1 − s + w²e^{−2s} = 0 at s = 0 when w² = 1
        let w = v(&[1.0]);
        let out = optimize_s(&v(&[0.0]), &v(&[0.0]), &one(), &one(), &w, &SOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.s[0], 0.0);
    }

    #[test]
    fn r_update_by_hand() {
        let s = vec![DVector::zeros(2), v(&[0.0, 2f64.ln()])];
        let w = vec![v(&[1.0, 2.0]), v(&[1.0, -2.0])];
        // u = (1, 2), (1, −1) → Σ = [[3, 1], [1, 6]]
        let r = r_update(&s, &w).unwrap();
        assert!((r.matrix()[(0, 1)] - 1.0 / 18f64.sqrt()).abs() < 1e-14);
        assert_eq!(r.matrix()[(0, 0)], 1.0);
        assert_eq!(r.matrix()[(1, 1)], 1.0);
    }

    #[test]
    fn correlation_json_round_trip() {
        let r = CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.25, -0.25, 1.0])).unwrap();
        let back: CorrelationMatrix = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<CorrelationMatrix>("[[1.0, 2.0], [2.0, 1.0]]").is_err());
    }

    #[test]
    fn variant_names() {
        assert_eq!("full".parse::<MtlVariant>().unwrap(), MtlVariant::Full);
        assert_eq!(MtlVariant::Diag.to_string(), "diag");
        assert!("diag+x".parse::<MtlVariant>().is_err());
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..=5).prop_flat_map(|d| {
            (
                prop::collection::vec(-2.0..2.0f64, d),
                prop::collection::vec(-2.0..2.0f64, d),
                prop::collection::vec(0.2..3.0f64, d),
                prop::collection::vec(-3.0..3.0f64, d),
                -0.6..0.6f64,
            )
        })
    }

    fn build(p: &[f64], lam: &[f64], rho: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = p.len();
        let r = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho.powi((i as i32 - j as i32).abs()) });
        (DMatrix::from_diagonal(&v(lam)), r)
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences((s, p, lam, w, rho) in arb_instance()) {
            let (lam, r) = build(&p, &lam, rho);
            let (s, p, w) = (v(&s), v(&p), v(&w));
            let g = s_grad(&s, &p, &lam, &r, &w).unwrap();
            let h = 1e-5;
            for j in 0..s.len() {
                let mut a = s.clone();
                let mut b = s.clone();
                a[j] += h;
                b[j] -= h;
                let fd = (s_log_posterior(&a, &p, &lam, &r, &w).unwrap() - s_log_posterior(&b, &p, &lam, &r, &w).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1.0), "coord {}: fd {} vs {}", j, fd, g[j]);
            }
        }

        #[test]
        fn ascent_is_monotone((s, p, lam, w, rho) in arb_instance()) {
            let (lam, r) = build(&p, &lam, rho);
            let out = optimize_s(&v(&s), &v(&p), &lam, &r, &v(&w), &SOptions::default()).unwrap();
            for pair in out.trace.windows(2) {
                prop_assert!(pair[1] >= pair[0]);
            }
        }

        #[test]
        fn scaled_covariance_round_trips_correlation(s in prop::collection::vec(-2.0..2.0f64, 3), rho in -0.6..0.6f64) {
            let (_, r) = build(&s, &[1.0, 1.0, 1.0], rho);
            let cov = scaled_covariance(&v(&s), &r);
            prop_assert!(linalg::min_eigenvalue(&cov) > -1e-12);
            let back = CorrelationMatrix::from_covariance(&cov).unwrap();
            prop_assert!((back.matrix() - &r).amax() < 1e-12);
        }

        #[test]
        fn prior_permutation_invariant(a in -0.4..0.4f64, b in -0.4..0.4f64, c in -0.4..0.4f64) {
            let r = DMatrix::from_row_slice(3, 3, &[1.0, a, b, a, 1.0, c, b, c, 1.0]);
            prop_assume!(linalg::min_eigenvalue(&r) > 1e-6);
            let perm = [2usize, 0, 1];
            let rp = DMatrix::from_fn(3, 3, |i, j| r[(perm[i], perm[j])]);
            let x = correlation_log_prior(&CorrelationMatrix::new(r).unwrap());
            let y = correlation_log_prior(&CorrelationMatrix::new(rp).unwrap());
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

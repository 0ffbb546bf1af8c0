//! Domain adaptation: task weight vectors diffuse down a coalescent tree.
//!
//! EM alternates a Laplace E-step (each task's prior is the tree-induced
//! Gaussian from all other tasks) with an M-step that rebuilds the tree by
//! greedy agglomeration and re-estimates the diffusion covariance Λ.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coalescent::{
    greedy_rate1_with, info_posteriors, leaf_cavities, posterior_marginals, CoalescentTree, Covariance,
    DiscreteEvidence, GaussianMessage, GreedyOptions, InfoMessage,
};
use crate::diffusion::{DiffusionKernel, DiscreteKernel};
use crate::error::{Error, Result};
use crate::fit::{self, Prediction};
use crate::learners::{likelihood_evidence, weight_posterior, TaskDataset, TaskKind, WeightPosterior, WeightPrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DaVariant {
    /// Diagonal Λ, inputs not modelled.
    Diag,
    /// Full Λ, inputs not modelled.
    Full,
    /// Diagonal Λ, inputs modelled.
    DiagX,
    /// Full Λ, inputs modelled.
    FullX,
    /// Tree built once from input statistics alone.
    Data,
}

impl DaVariant {
    pub const ALL: [DaVariant; 5] = [DaVariant::Diag, DaVariant::Full, DaVariant::DiagX, DaVariant::FullX, DaVariant::Data];

    pub fn full_kernel(self) -> bool {
        matches!(self, DaVariant::Full | DaVariant::FullX)
    }

    pub fn models_inputs(self) -> bool {
        matches!(self, DaVariant::DiagX | DaVariant::FullX | DaVariant::Data)
    }
}

impl fmt::Display for DaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DaVariant::Diag => "diag",
            DaVariant::Full => "full",
            DaVariant::DiagX => "diag+x",
            DaVariant::FullX => "full+x",
            DaVariant::Data => "data",
        })
    }
}

impl FromStr for DaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diag" => Ok(DaVariant::Diag),
            "full" => Ok(DaVariant::Full),
            "diag+x" | "diag-x" | "diagx" => Ok(DaVariant::DiagX),
            "full+x" | "full-x" | "fullx" => Ok(DaVariant::FullX),
            "data" => Ok(DaVariant::Data),
            _ => Err(Error::invalid(format!("unknown variant '{s}' (expected diag, full, diag+x, full+x or data)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub variant: DaVariant,
    /// Prior scale: initial weights are `N(0, σ²I)`, Λ starts at `σ²I`, and
    /// the root of the tree has prior `N(0, σ²I)`.
    pub sigma2: f64,
    /// Observation noise of the regression likelihood.
    pub rho2: f64,
    pub max_iters: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    /// 0-based indices of features treated as categorical by the input model.
    #[serde(default)]
    pub discrete_features: Vec<usize>,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            variant: DaVariant::Full,
            sigma2: 1.0,
            rho2: 1.0,
            max_iters: 20,
            heldout_fraction: 0.1,
            seed: 0,
            discrete_features: Vec::new(),
        }
    }
}

impl DaConfig {
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

    fn root_prior(&self, d: usize) -> GaussianMessage {
        fit::isotropic_message(d, self.sigma2, !self.variant.full_kernel())
    }
}

/// Per-task input statistics used by the input-modelling variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputModel {
    /// Features modelled as continuous.
    pub continuous: Vec<usize>,
    /// Diagonal diffusion over continuous feature means.
    pub kernel: DiffusionKernel,
    /// Per task: Gaussian over the continuous feature means.
    pub messages: Vec<GaussianMessage>,
    pub discrete: Option<DiscreteEvidence>,
}

impl InputModel {
    /// Continuous features contribute their empirical mean with variance
    /// `var / N_k`; discrete features contribute smoothed category frequencies,
    /// evolving under a telegraph kernel whose equilibrium is the pooled
    /// frequency and whose rate is 1.
    pub fn from_tasks(tasks: &[TaskDataset], discrete_features: &[usize], sigma2: f64) -> Result<Self> {
        let (d, _) = fit::common_shape(tasks)?;
        if let Some(&bad) = discrete_features.iter().find(|&&f| f >= d) {
            return Err(Error::Dimension { expected: d, got: bad + 1 });
        }
        let continuous: Vec<usize> = (0..d).filter(|f| !discrete_features.contains(f)).collect();
        if continuous.is_empty() {
            return Err(Error::invalid("the input model needs at least one continuous feature"));
        }
        let dense: Vec<_> = tasks.iter().map(|t| t.x.to_dense()).collect();
        let total: usize = tasks.iter().map(|t| t.len()).sum();

        let c = continuous.len();
        let mut pooled_mean: DVector<f64> = DVector::zeros(c);
        let mut pooled_sq: DVector<f64> = DVector::zeros(c);
        for x in &dense {
            for (j, &f) in continuous.iter().enumerate() {
                for r in 0..x.nrows() {
                    pooled_mean[j] += x[(r, f)];
                    pooled_sq[j] += x[(r, f)] * x[(r, f)];
                }
            }
        }
        let n_all = total.max(1) as f64;
        pooled_mean /= n_all;
        let pooled_var: DVector<f64> = DVector::from_fn(c, |j, _| (pooled_sq[j] / n_all - pooled_mean[j].powi(2)).max(1e-8));

        let messages = dense
            .iter()
            .map(|x| {
                let n = x.nrows();
                let mut mean = DVector::zeros(c);
                let mut var = DVector::zeros(c);
                for (j, &f) in continuous.iter().enumerate() {
                    if n == 0 {
                        mean[j] = pooled_mean[j];
                        var[j] = pooled_var[j];
                        continue;
                    }
                    let col = x.column(f);
                    let m = col.mean();
                    let v = if n >= 2 { col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64 } else { pooled_var[j] };
                    mean[j] = m;
                    var[j] = v.max(1e-8) / n as f64;
                }
                GaussianMessage { mean, var: Covariance::Diag(var) }
            })
            .collect();

        let discrete = if discrete_features.is_empty() {
            None
        } else {
            let mut equilibria = Vec::new();
            let mut per_task: Vec<Vec<DVector<f64>>> = vec![Vec::new(); tasks.len()];
            for &f in discrete_features {
                let mut cats: Vec<f64> = dense.iter().flat_map(|x| x.column(f).iter().copied().collect::<Vec<_>>()).collect();
                cats.sort_by(f64::total_cmp);
                cats.dedup();
                if cats.is_empty() {
                    cats.push(0.0);
                }
                let index = |v: f64| cats.binary_search_by(|c| c.total_cmp(&v)).expect("category seen in pooled data");
                let mut pooled: DVector<f64> = DVector::zeros(cats.len());
                for (t, x) in dense.iter().enumerate() {
                    let mut counts: DVector<f64> = DVector::zeros(cats.len());
                    for v in x.column(f).iter() {
                        counts[index(*v)] += 1.0;
                    }
                    pooled += &counts;
                    let n = x.nrows() as f64;
                    per_task[t].push(counts.map(|c| (c + 1.0) / (n + cats.len() as f64)));
                }
                let s = pooled.sum();
                equilibria.push(if s > 0.0 { pooled / s } else { DVector::from_element(cats.len(), 1.0 / cats.len() as f64) });
            }
            let rates = vec![1.0; equilibria.len()];
            Some(DiscreteEvidence { kernel: DiscreteKernel::new(equilibria, rates)?, messages: per_task })
        };
        Ok(InputModel { kernel: DiffusionKernel::isotropic(c, sigma2)?, continuous, messages, discrete })
    }
}

/// Fitted (or in-progress) domain-adaptation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaModelState {
    pub config: DaConfig,
    pub kind: TaskKind,
    pub dim: usize,
    #[serde(with = "crate::fit::tree_serde")]
    pub tree: CoalescentTree,
    pub kernel: DiffusionKernel,
    pub posteriors: Vec<WeightPosterior>,
    /// Posterior over the weights at every tree node.
    pub node_marginals: Vec<GaussianMessage>,
    pub input_model: Option<InputModel>,
    /// Held-out log-likelihood per iteration, starting with the initialization.
    pub trace: Vec<f64>,
    pub selected_iteration: usize,
}

impl DaModelState {
    pub fn num_tasks(&self) -> usize {
        self.posteriors.len()
    }

    pub fn weights(&self, task: usize) -> &DVector<f64> {
        &self.posteriors[task].mean
    }

    fn evidence(&self, tasks: &[TaskDataset]) -> Result<Vec<InfoMessage>> {
        if tasks.len() != self.num_tasks() {
            return Err(Error::Dimension { expected: self.num_tasks(), got: tasks.len() });
        }
        Ok(tasks
            .par_iter()
            .zip(&self.posteriors)
            .map(|(t, p)| likelihood_evidence(t, &p.mean, self.config.rho2))
            .collect())
    }
}

fn check_tasks(tasks: &[TaskDataset]) -> Result<(usize, TaskKind)> {
    if tasks.len() < 2 {
        return Err(Error::invalid("at least two tasks are required"));
    }
    fit::common_shape(tasks)
}

/// Leaf messages for tree construction: each task's own likelihood evidence
/// times the root prior, so that no leaf carries information from the others.
fn tree_leaves(evidence: &[InfoMessage], sigma2: f64, diag: bool) -> Result<Vec<GaussianMessage>> {
    evidence
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut own = e.clone();
            for j in 0..own.dim() {
                own.precision[(j, j)] += 1.0 / sigma2;
            }
            let m = own.to_moments(k)?;
            Ok(if diag { GaussianMessage { var: m.var.to_diag(), ..m } } else { m })
        })
        .collect()
}

/// Builds the tree from leaf messages according to the variant.
fn build_tree(weights: &[GaussianMessage], kernel: &DiffusionKernel, variant: DaVariant, input: Option<&InputModel>) -> Result<CoalescentTree> {
    let opts = GreedyOptions::default();
    match (variant, input) {
        (DaVariant::Data, Some(im)) => Ok(greedy_rate1_with(&im.messages, &im.kernel, im.discrete.as_ref(), &opts)?.tree),
        (DaVariant::DiagX | DaVariant::FullX, Some(im)) => {
            let joint: Vec<GaussianMessage> = weights.iter().zip(&im.messages).map(|(w, x)| w.concat(x)).collect();
            Ok(greedy_rate1_with(&joint, &kernel.concat(&im.kernel), im.discrete.as_ref(), &opts)?.tree)
        }
        _ => Ok(greedy_rate1_with(weights, kernel, None, &opts)?.tree),
    }
}

/// Tree (rebuilt unless `keep_tree`) and the posterior over the weights at
/// every node given all tasks' evidence.
fn fit_structure(state: &DaModelState, evidence: &[InfoMessage], keep_tree: bool) -> Result<(CoalescentTree, Vec<GaussianMessage>)> {
    let cfg = &state.config;
    let diag = !cfg.variant.full_kernel();
    let tree = if keep_tree {
        state.tree.clone()
    } else {
        let leaves = tree_leaves(evidence, cfg.sigma2, diag)?;
        build_tree(&leaves, &state.kernel, cfg.variant, state.input_model.as_ref())?
    };
    let mut marginals = info_posteriors(&tree, evidence, &state.kernel, Some(&cfg.root_prior(state.dim)))?;
    if diag {
        marginals.iter_mut().for_each(|m| m.var = m.var.to_diag());
    }
    Ok((tree, marginals))
}

/// Independent MAP weights under `N(0, σ²I)`, Λ = σ²I, and a greedy tree over
/// the resulting posteriors.
pub fn da_init(tasks: &[TaskDataset], config: &DaConfig) -> Result<DaModelState> {
    config.validate()?;
    let (d, kind) = check_tasks(tasks)?;
    let prior = WeightPrior::isotropic(d, config.sigma2)?;
    let posteriors = tasks
        .par_iter()
        .map(|t| weight_posterior(t, &prior, config.rho2))
        .collect::<Result<Vec<_>>>()?;
    let diag = !config.variant.full_kernel();
    let kernel = fit::isotropic_kernel(d, config.sigma2, diag)?;
    let input_model = if config.variant.models_inputs() {
        Some(InputModel::from_tasks(tasks, &config.discrete_features, config.sigma2)?)
    } else {
        None
    };
    let mut state = DaModelState {
        config: config.clone(),
        kind,
        dim: d,
        tree: CoalescentTree::single_leaf(),
        kernel,
        posteriors,
        node_marginals: Vec::new(),
        input_model,
        trace: Vec::new(),
        selected_iteration: 0,
    };
    let evidence = state.evidence(tasks)?;
    (state.tree, state.node_marginals) = fit_structure(&state, &evidence, false)?;
    Ok(state)
}

/// Tree-induced prior of every task: the Gaussian over its weights given the
/// root prior and the likelihood evidence of all other tasks.
pub fn da_task_priors(state: &DaModelState, tasks: &[TaskDataset]) -> Result<Vec<GaussianMessage>> {
    let evidence = state.evidence(tasks)?;
    leaf_cavities(&state.tree, &evidence, &state.kernel, Some(&state.config.root_prior(state.dim)))
}

/// E-step: MAP weights and Laplace covariance of every task under its
/// tree-induced prior. Exact for regression.
pub fn da_e_step(state: &DaModelState, tasks: &[TaskDataset]) -> Result<Vec<WeightPosterior>> {
    let priors = da_task_priors(state, tasks)?;
    tasks
        .par_iter()
        .zip(priors.par_iter())
        .map(|(t, p)| weight_posterior(t, &WeightPrior::from_message(p)?, state.config.rho2))
        .collect()
}

/// M-step: rebuild the tree from every task's own evidence (unless the
/// variant fixes it), compute node marginals given all evidence, and move Λ
/// (and the input diffusion, when modelled) to the inverse-Wishart mode.
/// Evidence is expanded around the current posterior means.
pub fn da_m_step(state: &DaModelState, tasks: &[TaskDataset]) -> Result<DaModelState> {
    let cfg = &state.config;
    let evidence = state.evidence(tasks)?;
    let (tree, marginals) = fit_structure(state, &evidence, cfg.variant == DaVariant::Data)?;
    let kernel = fit::diffusion_update(&tree, &marginals, &state.kernel, !cfg.variant.full_kernel())?;
    let input_model = match &state.input_model {
        Some(im) if cfg.variant != DaVariant::Data => {
            let prior = fit::isotropic_message(im.continuous.len(), cfg.sigma2, true);
            let xm = posterior_marginals(&tree, &im.messages, &im.kernel, Some(&prior))?;
            Some(InputModel { kernel: fit::diffusion_update(&tree, &xm, &im.kernel, true)?, ..im.clone() })
        }
        other => other.clone(),
    };
    Ok(DaModelState { tree, kernel, node_marginals: marginals, input_model, ..state.clone() })
}

/// Full EM with held-out model selection: a fraction of every task is held
/// out, EM runs for `max_iters` iterations after initialization, and the
/// iteration with the highest held-out log-likelihood is returned.
pub fn da_fit(tasks: &[TaskDataset], config: &DaConfig) -> Result<DaModelState> {
    config.validate()?;
    check_tasks(tasks)?;
    let (train, held) = fit::split_heldout(tasks, config.heldout_fraction, config.seed);
    let have_heldout = held.iter().any(|t| !t.is_empty());
    let score = |s: &DaModelState| {
        let ws: Vec<&DVector<f64>> = s.posteriors.iter().map(|p| &p.mean).collect();
        fit::heldout_log_likelihood(&held, &ws, config.rho2)
    };

    let mut state = da_init(&train, config)?;
    let mut trace = vec![score(&state)];
    let mut history = vec![state.clone()];
    for it in 1..=config.max_iters {
        let posteriors = da_e_step(&state, &train)?;
        state = da_m_step(&DaModelState { posteriors, ..state }, &train)?;
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

/// `w⁽ᵏ⁾ᵀx`, or the logistic probability for classification.
pub fn da_predict(state: &DaModelState, task: usize, x: &DVector<f64>) -> Result<Prediction> {
    let w = state
        .posteriors
        .get(task)
        .ok_or_else(|| Error::invalid(format!("task {task} out of range (model has {})", state.num_tasks())))?;
    fit::predict_linear(&w.mean, state.kind, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn task(x: &[f64], d: usize, y: &[f64], id: usize) -> TaskDataset {
        TaskDataset::from_dense(&DMatrix::from_row_slice(y.len(), d, x), y.to_vec(), TaskKind::Regression, id).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in DaVariant::ALL {
            assert_eq!(v.to_string().parse::<DaVariant>().unwrap(), v);
        }
        assert!("fancy".parse::<DaVariant>().is_err());
    }

    #[test]
    fn identical_tasks_start_identical() {
        let t0 = task(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2, &[1.0, -1.0, 0.5], 0);
        let t1 = TaskDataset { task: 1, ..t0.clone() };
        let s = da_init(&[t0, t1], &DaConfig::default()).unwrap();
        assert_eq!(s.posteriors[0], s.posteriors[1]);
        assert_eq!(s.tree.num_leaves(), 2);
    }

    #[test]
    fn zero_iterations_return_init() {
        let t0 = task(&[1.0, 2.0, 3.0], 1, &[1.0, 2.0, 3.0], 0);
        let t1 = task(&[1.0, 2.0, 3.0], 1, &[-1.0, -2.0, -3.0], 1);
        let cfg = DaConfig { max_iters: 0, ..DaConfig::default() };
        let s = da_fit(&[t0, t1], &cfg).unwrap();
        assert_eq!(s.trace.len(), 1);
        assert_eq!(s.selected_iteration, 0);
    }

    #[test]
    fn rejects_single_task() {
        let t0 = task(&[1.0], 1, &[1.0], 0);
        assert!(da_init(&[t0], &DaConfig::default()).is_err());
    }

    #[test]
    fn bad_config() {
        let cfg = DaConfig { heldout_fraction: 1.0, ..DaConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DaConfig { sigma2: 0.0, ..DaConfig::default() };
        assert!(cfg.validate().is_err());
    }
}

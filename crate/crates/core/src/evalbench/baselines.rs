//! Baselines and a common entry point that fits any method to per-task
//! linear weights.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::da::{da_fit, DaConfig, DaVariant};
use crate::error::{Error, Result};
use crate::fit;
use crate::learners::{map_weights, SparseRows, TaskDataset, TaskKind, WeightPrior};
use crate::mtl::{mtl_fit, MtlConfig, MtlVariant};

/// Every method the experiment drivers know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Indp,
    Pool,
    Feda,
    Coal(DaVariant),
    Mtl(MtlVariant),
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Indp,
        Method::Pool,
        Method::Feda,
        Method::Coal(DaVariant::Diag),
        Method::Coal(DaVariant::Full),
        Method::Coal(DaVariant::DiagX),
        Method::Coal(DaVariant::FullX),
        Method::Coal(DaVariant::Data),
        Method::Mtl(MtlVariant::Diag),
        Method::Mtl(MtlVariant::Full),
    ];

    /// Parses a comma-separated list such as `indp,pool,coal-full`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let methods = s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
        if methods.is_empty() {
            return Err(Error::invalid("no methods given"));
        }
        Ok(methods)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Indp => f.write_str("indp"),
            Method::Pool => f.write_str("pool"),
            Method::Feda => f.write_str("feda"),
            Method::Coal(v) => write!(f, "coal-{}", v.to_string().replace('+', "-")),
            Method::Mtl(v) => write!(f, "mtl-{v}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Hyperparameters shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub sigma2: f64,
    pub rho2: f64,
    pub max_iters: usize,
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Discrete input columns for the `+x` variants.
    pub discrete_features: Vec<usize>,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { sigma2: 1.0, rho2: 1.0, max_iters: 20, heldout_fraction: 0.1, seed: 0, discrete_features: Vec::new() }
    }
}

impl FitSettings {
    pub fn da_config(&self, variant: DaVariant) -> DaConfig {
        DaConfig {
            variant,
            sigma2: self.sigma2,
            rho2: self.rho2,
            max_iters: self.max_iters,
            heldout_fraction: self.heldout_fraction,
            seed: self.seed,
            discrete_features: self.discrete_features.clone(),
        }
    }

    pub fn mtl_config(&self, variant: MtlVariant) -> MtlConfig {
        MtlConfig {
            variant,
            sigma2: self.sigma2,
            rho2: self.rho2,
            max_iters: self.max_iters,
            heldout_fraction: self.heldout_fraction,
            seed: self.seed,
            ..MtlConfig::default()
        }
    }
}

/// Per-task weights from any method, plus the held-out trace of the EM
/// methods (empty for baselines).
#[derive(Debug, Clone, PartialEq)]
pub struct FittedWeights {
    pub method: Method,
    pub kind: TaskKind,
    pub weights: Vec<DVector<f64>>,
    pub trace: Vec<f64>,
}

pub fn fit_method(method: Method, tasks: &[TaskDataset], settings: &FitSettings) -> Result<FittedWeights> {
    let (_, kind) = fit::common_shape(tasks)?;
    let (weights, trace) = match method {
        Method::Indp => (baseline_indp(tasks, settings.sigma2, settings.rho2)?, Vec::new()),
        Method::Pool => (baseline_pool(tasks, settings.sigma2, settings.rho2)?, Vec::new()),
        Method::Feda => (baseline_feda(tasks, settings.sigma2, settings.rho2)?.task_weights(), Vec::new()),
        Method::Coal(v) => {
            let st = da_fit(tasks, &settings.da_config(v))?;
            ((0..tasks.len()).map(|k| st.weights(k).clone()).collect(), st.trace)
        }
        Method::Mtl(v) => {
            let st = mtl_fit(tasks, &settings.mtl_config(v))?;
            ((0..tasks.len()).map(|k| st.weights(k).clone()).collect(), st.trace)
        }
    };
    Ok(FittedWeights { method, kind, weights, trace })
}

/// Independent MAP weights under `N(0, σ²I)` for every task.
pub fn baseline_indp(tasks: &[TaskDataset], sigma2: f64, rho2: f64) -> Result<Vec<DVector<f64>>> {
    let (d, _) = fit::common_shape(tasks)?;
    let prior = WeightPrior::isotropic(d, sigma2)?;
    tasks.par_iter().map(|t| map_weights(t, &prior, rho2)).collect()
}

/// One MAP weight vector over the concatenated data, shared by every task.
pub fn baseline_pool(tasks: &[TaskDataset], sigma2: f64, rho2: f64) -> Result<Vec<DVector<f64>>> {
    let (d, _) = fit::common_shape(tasks)?;
    let pooled = TaskDataset::concat(&tasks.iter().collect::<Vec<_>>(), 0)?;
    let w = map_weights(&pooled, &WeightPrior::isotropic(d, sigma2)?, rho2)?;
    Ok(vec![w; tasks.len()])
}

/// Augmented input for task `k` of `num_tasks`: `[x; 0; …; x; …; 0]` with the
/// shared block first and `x` repeated in block `k + 1`.
pub fn feda_augment(task: &TaskDataset, k: usize, num_tasks: usize) -> Result<TaskDataset> {
    if k >= num_tasks {
        return Err(Error::invalid(format!("task {k} out of range for {num_tasks} tasks")));
    }
    let d = task.dim();
    let x = task.x.map_rows((num_tasks + 1) * d, |row| {
        let r: Vec<(usize, f64)> = row.collect();
        r.iter().copied().chain(r.iter().map(|&(i, v)| ((k + 1) * d + i, v))).collect()
    })?;
    TaskDataset::new(x, task.y.clone(), task.kind, task.task)
}

/// Pooled learner in the augmented space.
#[derive(Debug, Clone, PartialEq)]
pub struct FedaModel {
    pub dim: usize,
    pub num_tasks: usize,
    /// `(K + 1)·D` weights: shared block, then one block per task.
    pub weights: DVector<f64>,
}

impl FedaModel {
    pub fn shared(&self) -> DVector<f64> {
        self.weights.rows(0, self.dim).into_owned()
    }

    pub fn block(&self, k: usize) -> DVector<f64> {
        self.weights.rows((k + 1) * self.dim, self.dim).into_owned()
    }

    /// Effective per-task weights `w_shared + w_k`: the augmented score of
    /// task-k inputs equals their dot product with this vector.
    pub fn task_weights(&self) -> Vec<DVector<f64>> {
        let shared = self.shared();
        (0..self.num_tasks).map(|k| &shared + self.block(k)).collect()
    }
}

/// Feature augmentation: one pooled MAP fit with prior `N(0, σ²I)` over all
/// `(K + 1)·D` augmented weights.
pub fn baseline_feda(tasks: &[TaskDataset], sigma2: f64, rho2: f64) -> Result<FedaModel> {
    let (d, kind) = fit::common_shape(tasks)?;
    let k = tasks.len();
    let mut x = SparseRows::new((k + 1) * d);
    let mut y = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let aug = feda_augment(t, i, k)?;
        x.append(&aug.x)?;
        y.extend_from_slice(&aug.y);
    }
    let pooled = TaskDataset::new(x, y, kind, 0)?;
    let weights = map_weights(&pooled, &WeightPrior::isotropic((k + 1) * d, sigma2)?, rho2)?;
    Ok(FedaModel { dim: d, num_tasks: k, weights })
}

//! Pieces shared by the two EM drivers: held-out splits, held-out likelihood,
//! the inverse-Wishart mode update of a diffusion covariance, and prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coalescent::{CoalescentTree, Covariance, GaussianMessage};
use crate::diffusion::DiffusionKernel;
use crate::error::{Error, Result};
use crate::learners::{log_likelihood, sigmoid, TaskDataset, TaskKind};
use crate::linalg;

/// Output of a linear predictor for one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Regression(f64),
    Classification { probability: f64 },
}

impl Prediction {
    /// Real-valued output: the prediction itself, or the positive-class probability.
    pub fn score(&self) -> f64 {
        match *self {
            Prediction::Regression(v) => v,
            Prediction::Classification { probability } => probability,
        }
    }

    /// Predicted label; classification thresholds the probability at 0.5.
    pub fn label(&self) -> f64 {
        match *self {
            Prediction::Regression(v) => v,
            Prediction::Classification { probability } => {
                if probability >= 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

pub fn predict_linear(w: &DVector<f64>, kind: TaskKind, x: &DVector<f64>) -> Result<Prediction> {
    if x.len() != w.len() {
        return Err(Error::Dimension { expected: w.len(), got: x.len() });
    }
    let m = w.dot(x);
    Ok(match kind {
        TaskKind::Regression => Prediction::Regression(m),
        TaskKind::Classification => Prediction::Classification { probability: sigmoid(m) },
    })
}

/// Checks that all tasks share a width and a kind; returns both.
pub fn common_shape(tasks: &[TaskDataset]) -> Result<(usize, TaskKind)> {
    let first = tasks.first().ok_or_else(|| Error::invalid("no tasks"))?;
    for t in tasks {
        if t.dim() != first.dim() {
            return Err(Error::Dimension { expected: first.dim(), got: t.dim() });
        }
        if t.kind != first.kind {
            return Err(Error::invalid("all tasks must be regression or all classification"));
        }
    }
    Ok((first.dim(), first.kind))
}

/// Per-task random split into (train, heldout). Tasks with fewer than two
/// examples keep everything for training.
pub fn split_heldout(tasks: &[TaskDataset], fraction: f64, seed: u64) -> (Vec<TaskDataset>, Vec<TaskDataset>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(tasks.len());
    let mut held = Vec::with_capacity(tasks.len());
    for t in tasks {
        let n = t.len();
        if n < 2 {
            log::warn!("task {} has {n} example(s); nothing held out", t.task);
            train.push(t.clone());
            held.push(t.subset(&[]));
            continue;
        }
        let n_held = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut h = idx[..n_held].to_vec();
        let mut r = idx[n_held..].to_vec();
        h.sort_unstable();
        r.sort_unstable();
        train.push(t.subset(&r));
        held.push(t.subset(&h));
    }
    (train, held)
}

/// Log-likelihood of held-out data at point weights.
pub fn heldout_log_likelihood(heldout: &[TaskDataset], weights: &[&DVector<f64>], rho2: f64) -> f64 {
    heldout.iter().zip(weights).map(|(t, w)| log_likelihood(t, w, rho2)).sum()
}

/// Index of the best held-out score; ties go to the earliest iteration. With
/// no held-out data at all the last iteration is used.
pub fn select_iteration(trace: &[f64], have_heldout: bool) -> usize {
    if !have_heldout {
        return trace.len().saturating_sub(1);
    }
    let mut best = 0;
    for (i, &v) in trace.iter().enumerate() {
        if v > trace[best] {
            best = i;
        }
    }
    best
}

/// Scale matrix `Σ = I + Σ_i M_i^{-1/2} D_i D_iᵀ M_i^{-1/2}` over internal
/// nodes, with `D_i` the difference of the children's posterior means and
/// `M_i = v_l + v_r + (δ_l + δ_r) Λ`.
pub fn diffusion_scatter(tree: &CoalescentTree, marginals: &[GaussianMessage], kernel: &DiffusionKernel) -> Result<DMatrix<f64>> {
    let d = kernel.dim();
    if marginals.len() != tree.num_nodes() {
        return Err(Error::Dimension { expected: tree.num_nodes(), got: marginals.len() });
    }
    let mut sigma = DMatrix::identity(d, d);
    for i in tree.internal_nodes() {
        let ch = tree.children(i);
        let (l, r) = (ch[0], ch[1]);
        let t = tree.branch_length(l) + tree.branch_length(r);
        let diff = &marginals[l].mean - &marginals[r].mean;
        let m = marginals[l].var.add_scaled(&marginals[r].var, 1.0).add_scaled(kernel.covariance(), t);
        match m {
            Covariance::Diag(v) => {
                for j in 0..d {
                    sigma[(j, j)] += diff[j] * diff[j] / v[j];
                }
            }
            Covariance::Full(mf) => {
                let w = linalg::inv_sqrt_spd(&mf).ok_or_else(|| Error::numerical(i, "branch covariance is not SPD"))?;
                let z = w * diff;
                sigma += &z * z.transpose();
            }
        }
    }
    Ok(linalg::symmetrize(&sigma))
}

/// Inverse-Wishart mode `Σ / (ν + D + 1)` with `ν = D + K + 1`; `diag` keeps
/// only the diagonal.
pub fn diffusion_update(
    tree: &CoalescentTree,
    marginals: &[GaussianMessage],
    kernel: &DiffusionKernel,
    diag: bool,
) -> Result<DiffusionKernel> {
    let d = kernel.dim();
    let k = tree.num_leaves();
    let sigma = diffusion_scatter(tree, marginals, kernel)? / (2 * d + k + 2) as f64;
    if diag {
        DiffusionKernel::diag(sigma.diagonal())
    } else {
        DiffusionKernel::full(sigma)
    }
}

/// Weight posteriors as tree leaf messages; `diag` drops off-diagonal covariance.
pub fn leaf_messages<'a, I: IntoIterator<Item = (&'a DVector<f64>, &'a Covariance)>>(items: I, diag: bool) -> Vec<GaussianMessage> {
    items
        .into_iter()
        .map(|(m, c)| GaussianMessage { mean: m.clone(), var: if diag { c.to_diag() } else { c.clone() } })
        .collect()
}

/// `N(0, σ²I)` in the requested covariance form.
pub fn isotropic_message(d: usize, sigma2: f64, diag: bool) -> GaussianMessage {
    let var = if diag { Covariance::scaled_identity(d, sigma2) } else { Covariance::Full(DMatrix::identity(d, d) * sigma2) };
    GaussianMessage { mean: DVector::zeros(d), var }
}

pub fn isotropic_kernel(d: usize, sigma2: f64, diag: bool) -> Result<DiffusionKernel> {
    if diag {
        DiffusionKernel::isotropic(d, sigma2)
    } else {
        DiffusionKernel::full(DMatrix::identity(d, d) * sigma2)
    }
}

/// Serde adapter storing a tree as its Newick string.
/// Trees as `{leaves, merges: [[a, b, time], ...]}`; exact node times and
/// re-validated on load.
pub(crate) mod tree_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::coalescent::CoalescentTree;

    #[derive(Serialize, Deserialize)]
    struct Merges {
        leaves: usize,
        merges: Vec<(usize, usize, f64)>,
    }

    pub fn serialize<S: Serializer>(tree: &CoalescentTree, s: S) -> Result<S::Ok, S::Error> {
        let merges = tree
            .internal_nodes()
            .map(|id| {
                let c = tree.children(id);
                (c[0], c[1], tree.time(id))
            })
            .collect();
        Merges { leaves: tree.num_leaves(), merges }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CoalescentTree, D::Error> {
        let m = Merges::deserialize(d)?;
        if m.leaves == 1 && m.merges.is_empty() {
            return Ok(CoalescentTree::single_leaf());
        }
        CoalescentTree::from_merges(m.leaves, &m.merges).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(mean: f64, var: f64) -> GaussianMessage {
        GaussianMessage { mean: DVector::from_vec(vec![mean]), var: Covariance::Diag(DVector::from_vec(vec![var])) }
    }

    #[test]
    fn zero_differences_give_identity() {
        let tree = CoalescentTree::from_merges(3, &[(0, 1, -1.0), (3, 2, -2.0)]).unwrap();
        let msgs = vec![scalar(0.5, 0.0); 5];
        let k = DiffusionKernel::isotropic(1, 1.0).unwrap();
        assert_eq!(diffusion_scatter(&tree, &msgs, &k).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn two_leaf_scatter_by_hand() {
        let tree = CoalescentTree::from_merges(2, &[(0, 1, -0.5)]).unwrap();
        let msgs = vec![scalar(1.0, 0.2), scalar(-1.0, 0.3), scalar(0.0, 0.1)];
        let k = DiffusionKernel::isotropic(1, 2.0).unwrap();
        let expected = 1.0 + 4.0 / (0.2 + 0.3 + 1.0 * 2.0);
        assert!((diffusion_scatter(&tree, &msgs, &k).unwrap()[(0, 0)] - expected).abs() < 1e-15);
        let upd = diffusion_update(&tree, &msgs, &k, true).unwrap();
        assert!((upd.to_full_matrix()[(0, 0)] - expected / 6.0).abs() < 1e-15);
    }

    #[test]
    fn predictions() {
        let w = DVector::from_vec(vec![2.0]);
        let x = DVector::from_vec(vec![1.0]);
        assert_eq!(predict_linear(&w, TaskKind::Regression, &x).unwrap().score(), 2.0);
        let p = predict_linear(&DVector::zeros(1), TaskKind::Classification, &x).unwrap();
        assert_eq!(p.score(), 0.5);
        assert!(predict_linear(&w, TaskKind::Regression, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn selection_prefers_earliest_maximum() {
        assert_eq!(select_iteration(&[1.0, 3.0, 3.0, 2.0], true), 1);
        assert_eq!(select_iteration(&[0.0, 0.0, 0.0], false), 2);
    }

    #[test]
    fn split_keeps_every_example() {
        let x = DMatrix::from_fn(10, 2, |i, j| (i * 2 + j) as f64);
        let t = TaskDataset::from_dense(&x, (0..10).map(|i| i as f64).collect(), TaskKind::Regression, 0).unwrap();
        let (tr, he) = split_heldout(std::slice::from_ref(&t), 0.1, 3);
        assert_eq!(tr[0].len() + he[0].len(), 10);
        assert_eq!(he[0].len(), 1);
        let mut ys: Vec<f64> = tr[0].y.iter().chain(&he[0].y).copied().collect();
        ys.sort_by(f64::total_cmp);
        assert_eq!(ys, t.y);
    }

    #[derive(serde::Serialize, serde::Deserialize)]
    struct Holder {
        #[serde(with = "tree_serde")]
        tree: CoalescentTree,
    }

    #[test]
    fn tree_json_keeps_exact_times() {
        let tree = CoalescentTree::from_merges(3, &[(0, 2, -1.2345678901234567), (3, 1, -1.2345678911234567)]).unwrap();
        let json = serde_json::to_string(&Holder { tree: tree.clone() }).unwrap();
        let back: Holder = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tree, tree);
        let single = serde_json::to_string(&Holder { tree: CoalescentTree::single_leaf() }).unwrap();
        assert_eq!(serde_json::from_str::<Holder>(&single).unwrap().tree, CoalescentTree::single_leaf());
        assert!(serde_json::from_str::<Holder>(r#"{"tree":{"leaves":2,"merges":[[0,0,-1.0]]}}"#).is_err());
    }
}

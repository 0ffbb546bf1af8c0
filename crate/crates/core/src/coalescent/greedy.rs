//! Greedy bottom-up agglomeration under a rate-1 coalescent proposal.
//!
//! Every pair of active lineages proposes the merge time that maximizes
//! `log Exp(δ; 1) + log N(y_a - y_b; 0, v_a + v_b + (t_a - t) Λ + (t_b - t) Λ)`
//! (plus telegraph-kernel agreement terms for discrete features), and the pair
//! whose optimum lies closest to the present is merged. Pairs whose optima tie
//! (usually at the smallest admissible duration) are ranked by the objective.
//! Times already fixed are never revisited.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bp::merge_messages;
use super::{CoalescentTree, Covariance, GaussianMessage};
use crate::diffusion::{DiffusionKernel, DiscreteKernel};
use crate::error::{Error, Result};
use crate::linalg;

/// Search settings for the per-pair merge time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyOptions {
    /// Smallest admissible duration between consecutive events.
    pub min_delta: f64,
    /// Largest duration considered.
    pub max_delta: f64,
    /// Golden-section tolerance on time.
    pub tol: f64,
}

impl Default for GreedyOptions {
    fn default() -> Self {
        GreedyOptions { min_delta: 1e-9, max_delta: 1e6, tol: 1e-8 }
    }
}

/// Per-leaf categorical likelihood vectors for discrete features, evolved
/// under a telegraph kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEvidence {
    pub kernel: DiscreteKernel,
    /// `messages[leaf][feature]`, one likelihood vector over categories.
    pub messages: Vec<Vec<DVector<f64>>>,
}

/// Tree plus the upward message of every node.
#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub tree: CoalescentTree,
    pub messages: Vec<GaussianMessage>,
}

/// Builds a coalescent tree over the leaf messages with greedy rate-1 merges.
pub fn greedy_rate1(leaf_messages: &[GaussianMessage], kernel: &DiffusionKernel) -> Result<CoalescentTree> {
    Ok(greedy_rate1_with(leaf_messages, kernel, None, &GreedyOptions::default())?.tree)
}

/// Full-control variant: optional discrete evidence and search options.
pub fn greedy_rate1_with(
    leaf_messages: &[GaussianMessage],
    kernel: &DiffusionKernel,
    discrete: Option<&DiscreteEvidence>,
    opts: &GreedyOptions,
) -> Result<GreedyResult> {
    let k = leaf_messages.len();
    if k < 2 {
        return Err(Error::invalid("greedy agglomeration needs at least two leaves"));
    }
    let d = kernel.dim();
    if let Some(m) = leaf_messages.iter().find(|m| m.dim() != d) {
        return Err(Error::Dimension { expected: d, got: m.dim() });
    }
    if let Some(disc) = discrete {
        if disc.messages.len() != k || disc.messages.iter().any(|m| m.len() != disc.kernel.num_features()) {
            return Err(Error::invalid("discrete evidence must hold one vector per leaf and feature"));
        }
    }
    let whitener = Whitener::new(kernel)?;
    let grid = delta_grid(opts);

    let mut lineages: Vec<Lineage> = leaf_messages
        .iter()
        .enumerate()
        .map(|(i, m)| Lineage {
            node: i,
            min_leaf: i,
            time: 0.0,
            msg: m.clone(),
            discrete: discrete.map(|e| e.messages[i].iter().map(normalize).collect()).unwrap_or_default(),
        })
        .collect();
    let mut messages: Vec<GaussianMessage> = leaf_messages.to_vec();
    let mut cache: HashMap<(usize, usize), PairStats> = HashMap::new();
    let mut merges = Vec::with_capacity(k - 1);
    let mut t_prev = 0.0;

    for event in 0..k - 1 {
        lineages.sort_by_key(|l| l.min_leaf);
        let pairs: Vec<(usize, usize)> =
            (0..lineages.len()).flat_map(|i| (i + 1..lineages.len()).map(move |j| (i, j))).collect();
        let missing: Vec<(usize, usize)> = pairs
            .iter()
            .copied()
            .filter(|&(i, j)| !cache.contains_key(&(lineages[i].node, lineages[j].node)))
            .collect();
        let fresh: Vec<((usize, usize), PairStats)> = missing
            .par_iter()
            .map(|&(i, j)| {
                let (a, b) = (&lineages[i], &lineages[j]);
                whitener.pair_stats(&a.msg, &b.msg).map(|s| ((a.node, b.node), s))
            })
            .collect::<Result<_>>()?;
        cache.extend(fresh);

        let disc_kernel = discrete.map(|e| &e.kernel);
        let proposals: Vec<(f64, f64)> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let (a, b) = (&lineages[i], &lineages[j]);
                let stats = &cache[&(a.node, b.node)];
                let f = |delta: f64| pair_objective(stats, a, b, t_prev, delta, disc_kernel);
                maximize(&f, &grid, opts)
            })
            .collect();
        // Soonest proposal wins. Proposals within `2·tol` of the soonest (typically
        // several pairs clamped at `min_delta`) are ranked by their objective;
        // remaining ties go to the lowest pair in task-index order.
        let soonest = proposals.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let mut best = usize::MAX;
        for (p, prop) in proposals.iter().enumerate() {
            if prop.0 <= soonest + 2.0 * opts.tol && (best == usize::MAX || prop.1 > proposals[best].1) {
                best = p;
            }
        }
        let (delta, _) = proposals[best];
        let (i, j) = pairs[best];
        let t = t_prev - delta;
        let id = k + event;
        let (a, b) = (&lineages[i], &lineages[j]);
        let msg = merge_messages(&a.msg, a.time, &b.msg, b.time, t, kernel, id)?;
        let disc_msg = match disc_kernel {
            Some(dk) => (0..dk.num_features())
                .map(|f| {
                    let pa = dk.propagate(f, a.time - t, &a.discrete[f]);
                    let pb = dk.propagate(f, b.time - t, &b.discrete[f]);
                    normalize(&pa.component_mul(&pb))
                })
                .collect(),
            None => Vec::new(),
        };
        merges.push((a.node, b.node, t));
        let merged = Lineage { node: id, min_leaf: a.min_leaf.min(b.min_leaf), time: t, msg: msg.clone(), discrete: disc_msg };
        lineages.remove(j);
        lineages.remove(i);
        lineages.push(merged);
        messages.push(msg);
        t_prev = t;
    }
    let tree = CoalescentTree::from_merges(k, &merges)?;
    Ok(GreedyResult { tree, messages })
}

struct Lineage {
    node: usize,
    min_leaf: usize,
    time: f64,
    msg: GaussianMessage,
    discrete: Vec<DVector<f64>>,
}

/// Spectrum of `Λ^{-1/2}(v_a + v_b)Λ^{-T/2}` and the whitened mean difference;
/// with these the Gaussian merge likelihood is a sum of scalar terms in time.
#[derive(Debug, Clone)]
pub struct PairStats {
    alpha: DVector<f64>,
    z: DVector<f64>,
}

struct Whitener {
    diag: Option<DVector<f64>>,
    inv_chol: Option<DMatrix<f64>>,
}

impl Whitener {
    fn new(kernel: &DiffusionKernel) -> Result<Self> {
        match kernel.covariance() {
            Covariance::Diag(v) => Ok(Whitener { diag: Some(v.map(|x| 1.0 / x.sqrt())), inv_chol: None }),
            Covariance::Full(m) => {
                let chol = linalg::cholesky(m)
                    .ok_or_else(|| Error::numerical(0, "diffusion covariance must be positive definite for tree search"))?;
                let l = chol.l();
                let inv = l
                    .solve_lower_triangular(&DMatrix::identity(m.nrows(), m.nrows()))
                    .ok_or_else(|| Error::numerical(0, "diffusion covariance factor is singular"))?;
                Ok(Whitener { diag: None, inv_chol: Some(inv) })
            }
        }
    }

    fn pair_stats(&self, a: &GaussianMessage, b: &GaussianMessage) -> Result<PairStats> {
        let diff = &a.mean - &b.mean;
        match (&self.diag, &a.var, &b.var) {
            (Some(w), Covariance::Diag(va), Covariance::Diag(vb)) => {
                let alpha = (va + vb).component_mul(&w.map(|x| x * x));
                Ok(PairStats { alpha, z: diff.component_mul(w) })
            }
            _ => {
                let w = match (&self.diag, &self.inv_chol) {
                    (Some(dw), _) => DMatrix::from_diagonal(dw),
                    (None, Some(m)) => m.clone(),
                    _ => unreachable!(),
                };
                let v = a.var.to_full() + b.var.to_full();
                let m = linalg::symmetrize(&(&w * v * w.transpose()));
                let eig = SymmetricEigen::new(m);
                let alpha = eig.eigenvalues.map(|x| x.max(0.0));
                let z = eig.eigenvectors.transpose() * (w * diff);
                Ok(PairStats { alpha, z })
            }
        }
    }
}

fn normalize(v: &DVector<f64>) -> DVector<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v / s
    } else {
        v.clone()
    }
}

fn pair_objective(
    stats: &PairStats,
    a: &Lineage,
    b: &Lineage,
    t_prev: f64,
    delta: f64,
    discrete: Option<&DiscreteKernel>,
) -> f64 {
    let t = t_prev - delta;
    let u = (a.time - t) + (b.time - t);
    let mut f = -delta;
    for (al, z) in stats.alpha.iter().zip(stats.z.iter()) {
        let s = al + u;
        f -= 0.5 * (s.ln() + z * z / s);
    }
    if let Some(dk) = discrete {
        for feat in 0..dk.num_features() {
            let q = dk.equilibrium(feat);
            let pa = dk.propagate(feat, a.time - t, &a.discrete[feat]);
            let pb = dk.propagate(feat, b.time - t, &b.discrete[feat]);
            let num: f64 = q.iter().zip(pa.iter().zip(pb.iter())).map(|(qx, (x, y))| qx * x * y).sum();
            let den = q.dot(&a.discrete[feat]) * q.dot(&b.discrete[feat]);
            f += num.ln() - den.ln();
        }
    }
    f
}

/// Gaussian part of the merge objective evaluated directly; exposed for tests
/// and diagnostics.
pub fn merge_log_score(
    a: &GaussianMessage,
    t_a: f64,
    b: &GaussianMessage,
    t_b: f64,
    t_prev: f64,
    delta: f64,
    kernel: &DiffusionKernel,
) -> Result<f64> {
    let whitener = Whitener::new(kernel)?;
    let stats = whitener.pair_stats(a, b)?;
    let la = Lineage { node: 0, min_leaf: 0, time: t_a, msg: a.clone(), discrete: Vec::new() };
    let lb = Lineage { node: 1, min_leaf: 1, time: t_b, msg: b.clone(), discrete: Vec::new() };
    Ok(pair_objective(&stats, &la, &lb, t_prev, delta, None))
}

fn delta_grid(opts: &GreedyOptions) -> Vec<f64> {
    let lo = opts.min_delta.ln();
    let hi = opts.max_delta.ln();
    let steps = (((hi - lo) / (0.25 * std::f64::consts::LN_10)).ceil() as usize).max(2);
    (0..=steps).map(|i| (lo + (hi - lo) * i as f64 / steps as f64).exp()).collect()
}

/// Grid search followed by golden-section refinement between the grid
/// neighbours of the best point. Returns `(argmax, max)`.
fn maximize<F: Fn(f64) -> f64>(f: &F, grid: &[f64], opts: &GreedyOptions) -> (f64, f64) {
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut best = 0;
    for i in 1..vals.len() {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (x, fx) = golden_section(f, lo, hi, opts.tol);
    if fx >= vals[best] {
        (x, fx)
    } else {
        (grid[best], vals[best])
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: f64) -> GaussianMessage {
        GaussianMessage::point(DVector::from_vec(vec![x]))
    }

    #[test]
    fn two_leaves_give_unique_topology() {
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        let tree = greedy_rate1(&[point(0.0), point(1.0)], &kernel).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.root_split(), (vec![0], vec![1]));
    }

    #[test]
    fn nearest_points_merge_first() {
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        let tree = greedy_rate1(&[point(0.0), point(0.1), point(10.0)], &kernel).unwrap();
        assert_eq!(tree.leaf_set(3), vec![0, 1]);
    }

    #[test]
    fn scalar_optimum_matches_stationarity() {
        // Two point masses 0.1 apart: -1 - 1/(2δ) + 0.01/(4δ²) = 0.
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        let tree = greedy_rate1(&[point(0.0), point(0.1)], &kernel).unwrap();
        let expected = (-2.0 + (4.0f64 + 0.16).sqrt()) / 8.0;
        assert!((tree.durations()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn identical_points_hit_the_lower_bound() {
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        let tree = greedy_rate1(&[point(0.0), point(0.0), point(0.0)], &kernel).unwrap();
        tree.validate().unwrap();
        assert!(tree.durations().iter().all(|&d| d > 0.0 && d < 1e-6));
    }

    #[test]
    fn diag_and_full_kernels_agree() {
        let leaves: Vec<GaussianMessage> = [[0.0, 1.0], [0.3, 0.8], [4.0, -2.0], [4.5, -1.0]]
            .iter()
            .map(|p| GaussianMessage::new(DVector::from_row_slice(p), Covariance::Diag(DVector::from_vec(vec![0.1, 0.2]))).unwrap())
            .collect();
        let kd = DiffusionKernel::diag(DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let kf = DiffusionKernel::full(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        let a = greedy_rate1(&leaves, &kd).unwrap();
        let b = greedy_rate1(&leaves, &kf).unwrap();
        assert_eq!(a.clades(), b.clades());
        for (x, y) in a.durations().iter().zip(b.durations()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_leaves() {
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        assert!(greedy_rate1(&[point(0.0)], &kernel).is_err());
    }

    #[test]
    fn discrete_agreement_groups_matching_leaves() {
        let kernel = DiffusionKernel::isotropic(1, 1.0).unwrap();
        let dk = DiscreteKernel::new(vec![DVector::from_vec(vec![0.5, 0.5]); 3], vec![1.0; 3]).unwrap();
        let onehot = |c: usize| {
            let mut v = DVector::zeros(2);
            v[c] = 1.0;
            v
        };
        let leaves = vec![point(0.0), point(0.0), point(0.0)];
        let ev = DiscreteEvidence {
            kernel: dk,
            messages: vec![vec![onehot(0); 3], vec![onehot(1); 3], vec![onehot(0); 3]],
        };
        let res = greedy_rate1_with(&leaves, &kernel, Some(&ev), &GreedyOptions::default()).unwrap();
        assert_eq!(res.tree.leaf_set(3), vec![0, 2]);
    }
}

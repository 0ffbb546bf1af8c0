//! Forward samplers for the weight-sharing and scale-sharing generative
//! stories, with a plain-text ground-truth sidecar.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{brownian_step, sample_inverse_wishart, DiffusionKernel};
use crate::coalescent::{parse_newick, sample_coalescent, to_newick, CoalescentTree};
use crate::error::{Error, Result};
use crate::learners::{sigmoid, TaskDataset, TaskKind};
use crate::linalg;

/// Where the tree of a synthetic instance comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeSource {
    /// Draw `(π, δ)` from the K-coalescent.
    Sample,
    /// Use this tree as is.
    Fixed(CoalescentTree),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaInstanceConfig {
    pub num_tasks: usize,
    pub dim: usize,
    pub examples_per_task: usize,
    pub sigma2: f64,
    pub rho2: f64,
    pub kind: TaskKind,
    pub tree: TreeSource,
    /// Fixed Λ; drawn from `IW(σ²I, D + 1)` when absent.
    pub kernel: Option<DiffusionKernel>,
    /// Fixed root weights; drawn from `N(0, Λ)` when absent.
    pub root_mean: Option<DVector<f64>>,
    /// Standard deviation of the per-task input mean offsets.
    pub input_shift: f64,
    /// Standard deviation of inputs around their task mean.
    pub input_scale: f64,
}

impl DaInstanceConfig {
    pub fn new(num_tasks: usize, dim: usize, examples_per_task: usize, kind: TaskKind) -> Self {
        DaInstanceConfig {
            num_tasks,
            dim,
            examples_per_task,
            sigma2: 1.0,
            rho2: 0.1,
            kind,
            tree: TreeSource::Sample,
            kernel: None,
            root_mean: None,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlInstanceConfig {
    pub num_tasks: usize,
    pub dim: usize,
    pub examples_per_task: usize,
    pub sigma2: f64,
    pub rho2: f64,
    pub kind: TaskKind,
    pub tree: TreeSource,
    /// Fixed Λ over log standard deviations; drawn from `IW(σ²I, D + 1)` when absent.
    pub kernel: Option<DiffusionKernel>,
    /// Fixed correlation matrix; drawn by normalizing an `IW(I, D + 1)` draw when absent.
    pub correlation: Option<DMatrix<f64>>,
    /// Log standard deviations at the root (zeros when absent).
    pub root_log_std: Option<DVector<f64>>,
}

impl MtlInstanceConfig {
    pub fn new(num_tasks: usize, dim: usize, examples_per_task: usize, kind: TaskKind) -> Self {
        MtlInstanceConfig {
            num_tasks,
            dim,
            examples_per_task,
            sigma2: 1.0,
            rho2: 0.1,
            kind,
            tree: TreeSource::Sample,
            kernel: None,
            correlation: None,
            root_log_std: None,
        }
    }
}

/// What the sampler knows and a learner should recover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub tree: CoalescentTree,
    pub weights: Vec<DVector<f64>>,
    pub kernel: DMatrix<f64>,
    pub log_std: Option<Vec<DVector<f64>>>,
    pub correlation: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct DaInstance {
    pub truth: GroundTruth,
    /// Weight vector at every tree node.
    pub node_values: Vec<DVector<f64>>,
    pub input_means: Vec<DVector<f64>>,
    pub tasks: Vec<TaskDataset>,
}

#[derive(Debug, Clone)]
pub struct MtlInstance {
    pub truth: GroundTruth,
    /// Log standard deviations at every tree node.
    pub node_values: Vec<DVector<f64>>,
    pub tasks: Vec<TaskDataset>,
}

fn check_common(k: usize, d: usize, n: usize, sigma2: f64, rho2: f64, tree: &TreeSource) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid("synthetic instances need at least two tasks"));
    }
    if d == 0 || n == 0 {
        return Err(Error::invalid("dimension and examples per task must be >= 1"));
    }
    if !(sigma2 > 0.0) || !(rho2 >= 0.0) {
        return Err(Error::invalid("σ² must be > 0 and ρ² >= 0"));
    }
    if let TreeSource::Fixed(t) = tree {
        if t.num_leaves() != k {
            return Err(Error::Dimension { expected: k, got: t.num_leaves() });
        }
        t.validate()?;
    }
    Ok(())
}

fn draw_tree<R: Rng + ?Sized>(source: &TreeSource, k: usize, rng: &mut R) -> Result<CoalescentTree> {
    match source {
        TreeSource::Sample => sample_coalescent(k, rng),
        TreeSource::Fixed(t) => Ok(t.clone()),
    }
}

fn draw_kernel<R: Rng + ?Sized>(fixed: &Option<DiffusionKernel>, d: usize, sigma2: f64, rng: &mut R) -> Result<DiffusionKernel> {
    match fixed {
        Some(k) if k.dim() != d => Err(Error::Dimension { expected: d, got: k.dim() }),
        Some(k) => Ok(k.clone()),
        None => DiffusionKernel::full(sample_inverse_wishart(&(DMatrix::identity(d, d) * sigma2), d + 1, rng)?),
    }
}

/// Top-down Brownian diffusion from `root` along every branch.
fn diffuse_tree<R: Rng + ?Sized>(tree: &CoalescentTree, root: DVector<f64>, kernel: &DiffusionKernel, rng: &mut R) -> Vec<DVector<f64>> {
    let sqrt = kernel.sqrt();
    let mut values = vec![DVector::zeros(root.len()); tree.num_nodes()];
    values[tree.root()] = root;
    for i in tree.internal_nodes().rev() {
        for &c in tree.children(i) {
            values[c] = brownian_step(&values[i], tree.branch_length(c), &sqrt, rng);
        }
    }
    values
}

fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn draw_label<R: Rng + ?Sized>(margin: f64, kind: TaskKind, rho2: f64, rng: &mut R) -> f64 {
    match kind {
        TaskKind::Regression => margin + rho2.sqrt() * rng.sample::<f64, _>(StandardNormal),
        TaskKind::Classification => {
            if rng.random::<f64>() < sigmoid(margin) {
                1.0
            } else {
                -1.0
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_task<R: Rng + ?Sized>(
    w: &DVector<f64>,
    mean: &DVector<f64>,
    scale: f64,
    n: usize,
    kind: TaskKind,
    rho2: f64,
    task: usize,
    rng: &mut R,
) -> Result<TaskDataset> {
    let d = w.len();
    let mut x = DMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        let xr = mean + standard_normal(d, rng) * scale;
        y.push(draw_label(xr.dot(w), kind, rho2, rng));
        x.row_mut(r).copy_from(&xr.transpose());
    }
    TaskDataset::from_dense(&x, y, kind, task)
}

/// Runs the weight-sharing story: Λ and root weights, a coalescent tree,
/// Brownian weights down the tree, then per-task inputs and labels.
pub fn sample_da_instance<R: Rng + ?Sized>(cfg: &DaInstanceConfig, rng: &mut R) -> Result<DaInstance> {
    let (k, d) = (cfg.num_tasks, cfg.dim);
    check_common(k, d, cfg.examples_per_task, cfg.sigma2, cfg.rho2, &cfg.tree)?;
    let kernel = draw_kernel(&cfg.kernel, d, cfg.sigma2, rng)?;
    let root = match &cfg.root_mean {
        Some(m) if m.len() != d => return Err(Error::Dimension { expected: d, got: m.len() }),
        Some(m) => m.clone(),
        None => kernel.sqrt() * standard_normal(d, rng),
    };
    let tree = draw_tree(&cfg.tree, k, rng)?;
    let node_values = diffuse_tree(&tree, root, &kernel, rng);
    let weights: Vec<DVector<f64>> = node_values[..k].to_vec();

    let input_means: Vec<DVector<f64>> = (0..k).map(|_| standard_normal(d, rng) * cfg.input_shift).collect();
    let tasks = (0..k)
        .map(|t| draw_task(&weights[t], &input_means[t], cfg.input_scale, cfg.examples_per_task, cfg.kind, cfg.rho2, t, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DaInstance {
        truth: GroundTruth { tree, weights, kernel: kernel.to_full_matrix(), log_std: None, correlation: None },
        node_values,
        input_means,
        tasks,
    })
}

/// Unit-diagonal rescaling `diag(Σ)^{-1/2} Σ diag(Σ)^{-1/2}`.
pub fn normalize_correlation(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let s: Vec<f64> = sigma.diagonal().iter().map(|v| v.sqrt()).collect();
    let mut r = DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |i, j| sigma[(i, j)] / (s[i] * s[j]));
    for i in 0..r.nrows() {
        r[(i, i)] = 1.0;
    }
    linalg::symmetrize(&r)
}

/// `(e^S) R (e^S)` for a diagonal `S` given as a vector.
pub fn scaled_covariance(log_std: &DVector<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let e: Vec<f64> = log_std.iter().map(|s| s.exp()).collect();
    DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| e[i] * r[(i, j)] * e[j])
}

/// Runs the scale-sharing story: R and Λ, a coalescent tree, Brownian log
/// standard deviations down the tree, `w ~ N(0, e^S R e^S)` at each leaf, then
/// inputs from a shared standard normal and labels.
pub fn sample_mtl_instance<R: Rng + ?Sized>(cfg: &MtlInstanceConfig, rng: &mut R) -> Result<MtlInstance> {
    let (k, d) = (cfg.num_tasks, cfg.dim);
    check_common(k, d, cfg.examples_per_task, cfg.sigma2, cfg.rho2, &cfg.tree)?;
    let corr = match &cfg.correlation {
        Some(r) => {
            if r.nrows() != d || r.ncols() != d {
                return Err(Error::Dimension { expected: d, got: r.nrows() });
            }
            if (0..d).any(|i| r[(i, i)] != 1.0) || linalg::min_eigenvalue(r) < -1e-12 {
                return Err(Error::invalid("correlation matrix must be PSD with unit diagonal"));
            }
            r.clone()
        }
        None => normalize_correlation(&sample_inverse_wishart(&DMatrix::identity(d, d), d + 1, rng)?),
    };
    let kernel = draw_kernel(&cfg.kernel, d, cfg.sigma2, rng)?;
    let root = match &cfg.root_log_std {
        Some(s) if s.len() != d => return Err(Error::Dimension { expected: d, got: s.len() }),
        Some(s) => s.clone(),
        None => DVector::zeros(d),
    };
    let tree = draw_tree(&cfg.tree, k, rng)?;
    let node_values = diffuse_tree(&tree, root, &kernel, rng);
    let log_std: Vec<DVector<f64>> = node_values[..k].to_vec();

    let weights = log_std
        .iter()
        .map(|s| {
            let cov = scaled_covariance(s, &corr);
            let l = linalg::cholesky(&(&cov + DMatrix::identity(d, d) * 1e-12))
                .ok_or_else(|| Error::numerical(0, "weight covariance is not PSD"))?
                .l();
            Ok(l * standard_normal(d, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let zero = DVector::zeros(d);
    let tasks = (0..k)
        .map(|t| draw_task(&weights[t], &zero, 1.0, cfg.examples_per_task, cfg.kind, cfg.rho2, t, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(MtlInstance {
        truth: GroundTruth {
            tree,
            weights,
            kernel: kernel.to_full_matrix(),
            log_std: Some(log_std),
            correlation: Some(corr),
        },
        node_values,
        tasks,
    })
}

const TRUTH_HEADER: &str = "# coalmtl ground truth v1";

fn write_rows<W: Write>(out: &mut W, name: &str, rows: &[DVector<f64>]) -> std::io::Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    writeln!(out, "{name} {} {d}", rows.len())?;
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.nrows()).map(|i| m.row(i).transpose()).collect()
}

impl GroundTruth {
    /// Text sidecar: the tree in Newick, then named blocks of dense rows.
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{TRUTH_HEADER}")?;
        writeln!(out, "tree {}", to_newick(&self.tree, None))?;
        write_rows(out, "weights", &self.weights)?;
        write_rows(out, "kernel", &matrix_rows(&self.kernel))?;
        if let Some(s) = &self.log_std {
            write_rows(out, "log_std", s)?;
        }
        if let Some(r) = &self.correlation {
            write_rows(out, "correlation", &matrix_rows(r))?;
        }
        Ok(())
    }

    pub fn read<B: BufRead>(input: B) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        let mut it = lines.iter().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match it.next() {
            Some((_, l)) if l.trim() == TRUTH_HEADER => {}
            _ => return Err(Error::data(Some(1), "missing ground-truth header")),
        }
        let mut tree = None;
        let mut blocks: Vec<(String, Vec<DVector<f64>>)> = Vec::new();
        while let Some((no, line)) = it.next() {
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            if name == "tree" {
                let newick = line.trim_start()["tree".len()..].trim();
                tree = Some(parse_newick(newick).map_err(|e| Error::data(Some(no + 1), e.to_string()))?.0);
                continue;
            }
            let dims: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| Error::data(Some(no + 1), format!("bad block size '{p}'"))))
                .collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(Error::data(Some(no + 1), format!("block '{name}' needs a row and column count")));
            };
            let mut block = Vec::with_capacity(rows);
            for _ in 0..rows {
                let (rno, row) = it.next().ok_or_else(|| Error::data(None, format!("block '{name}' is truncated")))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| Error::data(Some(rno + 1), format!("bad number '{v}'"))))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::data(Some(rno + 1), format!("expected {cols} values, got {}", vals.len())));
                }
                block.push(DVector::from_vec(vals));
            }
            blocks.push((name, block));
        }
        let mut take = |name: &str| blocks.iter().position(|(n, _)| n == name).map(|i| blocks.remove(i).1);
        let to_matrix = |rows: Vec<DVector<f64>>| {
            let d = rows.len();
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        };
        let tree = tree.ok_or_else(|| Error::data(None, "ground truth has no tree"))?;
        let weights = take("weights").ok_or_else(|| Error::data(None, "ground truth has no weights"))?;
        let kernel = to_matrix(take("kernel").ok_or_else(|| Error::data(None, "ground truth has no kernel"))?);
        let log_std = take("log_std");
        let correlation = take("correlation").map(to_matrix);
        Ok(GroundTruth { tree, weights, kernel, log_std, correlation })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_regression_is_exact() {
        let mut cfg = DaInstanceConfig::new(3, 4, 20, TaskKind::Regression);
        cfg.rho2 = 0.0;
        let inst = sample_da_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in &inst.tasks {
            let pred = t.x.mul_vec(&inst.truth.weights[t.task]);
            for (p, y) in pred.iter().zip(&t.y) {
                assert_eq!(p, y);
            }
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = MtlInstanceConfig::new(4, 3, 10, TaskKind::Classification);
        let a = sample_mtl_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mtl_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.tasks, b.tasks);
    }

    #[test]
    fn sidecar_round_trip() {
        let cfg = MtlInstanceConfig::new(3, 2, 5, TaskKind::Regression);
        let inst = sample_mtl_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut buf = Vec::new();
        inst.truth.write(&mut buf).unwrap();
        let back = GroundTruth::read(&buf[..]).unwrap();
        assert_eq!(back.weights, inst.truth.weights);
        assert_eq!(back.log_std, inst.truth.log_std);
        assert_eq!(back.correlation, inst.truth.correlation);
        assert_eq!(back.tree.clades(), inst.truth.tree.clades());
    }

    #[test]
    fn correlation_round_trip() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let s = DVector::from_vec(vec![0.5, -1.0]);
        let back = normalize_correlation(&scaled_covariance(&s, &r));
        assert!((back - r).amax() < 1e-15);
    }

    #[test]
    fn wrong_fixed_tree_size() {
        let mut cfg = DaInstanceConfig::new(3, 2, 5, TaskKind::Regression);
        cfg.tree = TreeSource::Fixed(CoalescentTree::from_merges(2, &[(0, 1, -1.0)]).unwrap());
        assert!(sample_da_instance(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

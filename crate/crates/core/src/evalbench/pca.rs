//! Principal-component projection fitted on pooled training inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::corpus::MultiTaskCorpus;
use crate::error::{Error, Result};
use crate::learners::{SparseRows, TaskDataset};
use crate::linalg;

/// `z = Vᵀ (x − μ)` with orthonormal columns `V`, ordered by decreasing
/// variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: DVector<f64>,
    /// `D × m`.
    pub components: DMatrix<f64>,
    /// Variance of the pooled data along each component.
    pub variances: DVector<f64>,
}

impl PcaProjection {
    /// Fits on the pooled rows of `tasks`. Asking for more components than
    /// the data has rank keeps only the rank.
    pub fn fit(tasks: &[TaskDataset], target_dim: usize) -> Result<Self> {
        let d = tasks.first().map(|t| t.dim()).ok_or_else(|| Error::invalid("no tasks"))?;
        if target_dim == 0 || target_dim > d {
            return Err(Error::invalid(format!("PCA target dimension must be in 1..={d}, got {target_dim}")));
        }
        let n: usize = tasks.iter().map(|t| t.len()).sum();
        if n < target_dim {
            return Err(Error::invalid(format!("PCA to {target_dim} dimensions needs at least that many rows, got {n}")));
        }
        let mut mean = DVector::zeros(d);
        for t in tasks {
            mean += t.x.tr_mul_vec(&vec![1.0; t.len()]);
        }
        mean /= n as f64;
        let mut scatter = DMatrix::zeros(d, d);
        for t in tasks {
            scatter += t.x.weighted_gram(&vec![1.0; t.len()]);
        }
        let cov = linalg::symmetrize(&((scatter - &mean * mean.transpose() * n as f64) / n as f64));

        let eig = linalg::psd_eigen(&cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-12 * top.max(1e-300)).count().max(1);
        let m = if target_dim > rank {
            log::warn!("PCA: data has rank {rank}; keeping {rank} of the {target_dim} requested components");
            rank
        } else {
            target_dim
        };
        let mut components = DMatrix::zeros(d, m);
        let mut variances = DVector::zeros(m);
        for (c, &i) in order.iter().take(m).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // sign convention: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            components.set_column(c, &v);
            variances[c] = eig.eigenvalues[i].max(0.0);
        }
        Ok(PcaProjection { mean, components, variances })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(self.components.tr_mul(&(x - &self.mean)))
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.components * z + &self.mean
    }

    /// Projects every row of a task; the result is stored densely.
    pub fn project_task(&self, task: &TaskDataset) -> Result<TaskDataset> {
        if task.dim() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), got: task.dim() });
        }
        let shift = self.components.tr_mul(&self.mean);
        let mut x = SparseRows::new(self.output_dim());
        for r in 0..task.len() {
            let mut z = -&shift;
            for (i, v) in task.x.row(r) {
                z.axpy(v, &self.components.row(i).transpose(), 1.0);
            }
            let entries: Vec<(usize, f64)> = z.iter().copied().enumerate().collect();
            x.push_row(&entries)?;
        }
        TaskDataset::new(x, task.y.clone(), task.kind, task.task)
    }
}

/// Fits on all tasks of `corpus` and projects them.
pub fn pca_project(corpus: &MultiTaskCorpus, target_dim: usize) -> Result<(MultiTaskCorpus, PcaProjection)> {
    let proj = PcaProjection::fit(&corpus.tasks, target_dim)?;
    let tasks = corpus.tasks.iter().map(|t| proj.project_task(t)).collect::<Result<Vec<_>>>()?;
    Ok((corpus.with_tasks(tasks)?, proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::TaskKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn task(x: DMatrix<f64>) -> TaskDataset {
        let n = x.nrows();
        TaskDataset::from_dense(&x, vec![0.0; n], TaskKind::Regression, 0).unwrap()
    }

    fn max_reconstruction_error(p: &PcaProjection, t: &TaskDataset) -> f64 {
        (0..t.len())
            .map(|r| {
                let x = t.x.row_dense(r);
                (p.reconstruct(&p.project(&x).unwrap()) - x).amax()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn full_dimension_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = task(DMatrix::from_fn(30, 4, |_, _| rng.sample(StandardNormal)));
        let p = PcaProjection::fit(std::slice::from_ref(&t), 4).unwrap();
        assert!(max_reconstruction_error(&p, &t) < 1e-10);
        let gram = p.components.tr_mul(&p.components);
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn exact_subspace_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = DMatrix::from_fn(5, 2, |_, _| rng.sample(StandardNormal));
        let coef = DMatrix::from_fn(40, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset = DVector::from_fn(5, |i, _| i as f64);
        let mut x = coef * basis.transpose();
        for mut row in x.row_iter_mut() {
            row += offset.transpose();
        }
        let t = task(x);
        let p = PcaProjection::fit(std::slice::from_ref(&t), 2).unwrap();
        assert!(max_reconstruction_error(&p, &t) <= 1e-10);
        // asking for more than the rank keeps the rank
        let p3 = PcaProjection::fit(std::slice::from_ref(&t), 4).unwrap();
        assert_eq!(p3.output_dim(), 2);
    }

    #[test]
    fn projected_rows_match_dense_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = task(DMatrix::from_fn(12, 3, |_, _| rng.sample(StandardNormal)));
        let p = PcaProjection::fit(std::slice::from_ref(&t), 2).unwrap();
        let pt = p.project_task(&t).unwrap();
        for r in 0..t.len() {
            assert!((pt.x.row_dense(r) - p.project(&t.x.row_dense(r)).unwrap()).amax() < 1e-12);
        }
    }

    #[test]
    fn bad_targets_are_rejected() {
        let t = task(DMatrix::identity(3, 3));
        assert!(PcaProjection::fit(std::slice::from_ref(&t), 0).is_err());
        assert!(PcaProjection::fit(std::slice::from_ref(&t), 4).is_err());
    }
}

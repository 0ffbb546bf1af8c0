use approx::assert_relative_eq;
use coalmtl::evalbench::experiments::ColumnScramble;
use coalmtl::evalbench::{baseline_feda, baseline_indp, baseline_pool, PcaProjection};
use coalmtl::{TaskDataset, TaskKind};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_task(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> TaskDataset {
    let x = DMatrix::from_fn(n, d, |_, j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64));
    let y = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    TaskDataset::from_dense(&x, y, TaskKind::Regression, k).unwrap()
}

/// Gaussian-likelihood MAP: `(XᵀX/ρ² + I/σ²)⁻¹ Xᵀy/ρ²`.
fn ridge(x: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64, rho2: f64) -> DVector<f64> {
    let d = x.ncols();
    let a = x.transpose() * x / rho2 + DMatrix::identity(d, d) / sigma2;
    a.cholesky().unwrap().solve(&(x.transpose() * y / rho2))
}

fn stacked(tasks: &[&TaskDataset]) -> (DMatrix<f64>, DVector<f64>) {
    let d = tasks[0].dim();
    let n: usize = tasks.iter().map(|t| t.len()).sum();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut r = 0;
    for t in tasks {
        let xt = t.x.to_dense();
        x.view_mut((r, 0), (t.len(), d)).copy_from(&xt);
        for (i, v) in t.y.iter().enumerate() {
            y[r + i] = *v;
        }
        r += t.len();
    }
    (x, y)
}

#[test]
fn indp_matches_ridge_per_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tasks: Vec<TaskDataset> = (0..3).map(|k| random_task(12 + 5 * k, 4, k, &mut rng)).collect();
    let w = baseline_indp(&tasks, 2.0, 0.5).unwrap();
    for (t, wk) in tasks.iter().zip(&w) {
        let (x, y) = stacked(&[t]);
        assert_relative_eq!(*wk, ridge(&x, &y, 2.0, 0.5), max_relative = 1e-6, epsilon = 1e-8);
    }
}

#[test]
fn pool_matches_ridge_on_stacked_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tasks: Vec<TaskDataset> = (0..3).map(|k| random_task(10, 3, k, &mut rng)).collect();
    let w = baseline_pool(&tasks, 1.5, 0.3).unwrap();
    let (x, y) = stacked(&tasks.iter().collect::<Vec<_>>());
    let expected = ridge(&x, &y, 1.5, 0.3);
    for wk in &w {
        assert_relative_eq!(*wk, expected, max_relative = 1e-6, epsilon = 1e-8);
    }
}

#[test]
fn pool_of_identical_tasks_doubles_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_task(15, 3, 0, &mut rng);
    let mut twin = t.clone();
    twin.task = 1;
    let w = baseline_pool(&[t.clone(), twin], 1.0, 1.0).unwrap();
    // doubling every row is the same as halving the noise variance
    let single = baseline_indp(&[t], 1.0, 0.5).unwrap();
    assert_relative_eq!(w[0], single[0], max_relative = 1e-6, epsilon = 1e-8);
}

#[test]
fn feda_matches_ridge_in_augmented_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (k, d) = (3, 2);
    let tasks: Vec<TaskDataset> = (0..k).map(|i| random_task(8 + i, d, i, &mut rng)).collect();
    let model = baseline_feda(&tasks, 0.7, 0.4).unwrap();

    let n: usize = tasks.iter().map(|t| t.len()).sum();
    let mut x = DMatrix::zeros(n, (k + 1) * d);
    let mut y = DVector::zeros(n);
    let mut r = 0;
    for (i, t) in tasks.iter().enumerate() {
        let xt = t.x.to_dense();
        x.view_mut((r, 0), (t.len(), d)).copy_from(&xt);
        x.view_mut((r, (i + 1) * d), (t.len(), d)).copy_from(&xt);
        for (j, v) in t.y.iter().enumerate() {
            y[r + j] = *v;
        }
        r += t.len();
    }
    let expected = ridge(&x, &y, 0.7, 0.4);
    assert_relative_eq!(model.weights, expected, max_relative = 1e-6, epsilon = 1e-8);

    // the shared block absorbs what the tasks have in common: it equals the
    // sum of the task blocks (stationarity in the shared coordinates)
    let sum_blocks = (0..k).fold(DVector::zeros(d), |acc, i| acc + model.block(i));
    assert_relative_eq!(model.shared(), sum_blocks, epsilon = 1e-6);
    for (i, t) in tasks.iter().enumerate() {
        let xt = t.x.to_dense();
        let direct = x.rows(tasks[..i].iter().map(|t| t.len()).sum(), t.len()) * &model.weights;
        assert_relative_eq!(xt * &model.task_weights()[i], direct, epsilon = 1e-9);
    }
}

#[test]
fn indp_recovers_noiseless_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let truth = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let x = DMatrix::from_fn(400, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = (&x * &truth).iter().copied().collect();
    let t = TaskDataset::from_dense(&x, y, TaskKind::Regression, 0).unwrap();
    let w = baseline_indp(&[t], 100.0, 1e-3).unwrap();
    assert_relative_eq!(w[0], truth, epsilon = 1e-4);
}

#[test]
fn pca_matches_dense_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 5;
    let tasks: Vec<TaskDataset> = (0..2).map(|k| random_task(40, d, k, &mut rng)).collect();
    let pca = PcaProjection::fit(&tasks, 3).unwrap();

    let (x, _) = stacked(&tasks.iter().collect::<Vec<_>>());
    let n = x.nrows() as f64;
    let mean = x.row_sum().transpose() / n;
    let centred = DMatrix::from_fn(x.nrows(), d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    assert_relative_eq!(pca.mean, mean, epsilon = 1e-10);
    for (c, &i) in order.iter().take(3).enumerate() {
        assert_relative_eq!(pca.variances[c], eig.eigenvalues[i], max_relative = 1e-9);
        let v = eig.eigenvectors.column(i);
        assert_relative_eq!(pca.components.column(c).dot(&v).abs(), 1.0, epsilon = 1e-8);
    }
    for c in 1..3 {
        assert!(pca.variances[c - 1] >= pca.variances[c]);
    }
    assert_relative_eq!(pca.components.transpose() * &pca.components, DMatrix::identity(3, 3), epsilon = 1e-10);
}

proptest! {
    #[test]
    fn scramble_permutes_whole_columns(seed in 0u64..1000, p in 0.0f64..=1.0, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_task(6, d, 0, &mut rng);
        let s = ColumnScramble::sample(d, p, &mut rng).unwrap();
        let mut sorted = s.perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..d).collect::<Vec<_>>());
        let moved = s.perm.iter().enumerate().filter(|&(i, &j)| i != j).count();
        prop_assert!(moved <= (p * d as f64).ceil() as usize);

        let out = s.apply(&t).unwrap();
        let (a, b) = (t.x.to_dense(), out.x.to_dense());
        for (i, &j) in s.perm.iter().enumerate() {
            prop_assert_eq!(a.column(i), b.column(j));
        }
        prop_assert_eq!(&out.y, &t.y);
    }
}

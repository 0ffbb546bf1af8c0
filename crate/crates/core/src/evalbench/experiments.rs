//! Experiment drivers: learning curves, transfer to a target task, and the
//! noisy-copy (scrambled task) sweep. Every (method, size, seed) cell is
//! fitted independently and in parallel; rows come back in input order.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{fit_method, FitSettings, Method};
use super::corpus::MultiTaskCorpus;
use super::metrics::{evaluate_weights, Metric};
use super::pca::PcaProjection;
use crate::error::{Error, Result};
use crate::learners::TaskDataset;

pub const MACRO_TASK: &str = "macro";

/// One CSV row: `method,task,size,seed,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub task: String,
    pub size: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Held-out log-likelihood per EM iteration for one fitted cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub method: String,
    pub size: usize,
    pub seed: u64,
    pub setting: Option<String>,
    pub trace: Vec<f64>,
}

/// Test rows (indices into the original task) used under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub task: String,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub traces: Vec<TraceRecord>,
    pub splits: Vec<SplitRecord>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["method", "task", "size", "seed", "metric", "value"]).map_err(csv_err)?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    /// `method,size,seed,setting,iteration,heldout_loglik`.
    pub fn write_traces_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "size", "seed", "setting", "iteration", "heldout_loglik"]).map_err(csv_err)?;
        for t in &self.traces {
            for (i, v) in t.trace.iter().enumerate() {
                let rec = [
                    t.method.clone(),
                    t.size.to_string(),
                    t.seed.to_string(),
                    t.setting.clone().unwrap_or_default(),
                    i.to_string(),
                    v.to_string(),
                ];
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rows for one method and task, in report order.
    pub fn select<'a>(&'a self, method: &'a str, task: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && r.task == task)
    }

    fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.traces.extend(other.traces);
        self.splits.extend(other.splits);
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Options shared by the drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Metric override; by default accuracy for classification, R² for regression.
    pub metric: Option<Metric>,
    /// Fraction of each task held out for testing.
    pub test_fraction: f64,
    /// PCA width, fitted on each cell's pooled training inputs.
    pub pca: Option<usize>,
    pub settings: FitSettings,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { metric: None, test_fraction: 0.5, pca: None, settings: FitSettings::default() }
    }
}

impl EvalOptions {
    fn metric_for(&self, corpus: &MultiTaskCorpus) -> Result<Metric> {
        let kind = corpus.label_kind();
        let m = self.metric.unwrap_or_else(|| Metric::default_for(kind));
        if !m.supports(kind) {
            return Err(Error::invalid(format!("metric {m} does not apply to {kind:?} corpora")));
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Per seed: each task's training pool (shuffled, so any prefix is a random
/// subsample and smaller sizes nest in larger ones) and its test split.
struct Split {
    train_pool: Vec<TaskDataset>,
    test: Vec<TaskDataset>,
    records: Vec<SplitRecord>,
}

fn split_corpus(corpus: &MultiTaskCorpus, test_fraction: f64, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train_pool: Vec::new(), test: Vec::new(), records: Vec::new() };
    for (t, name) in corpus.tasks.iter().zip(&corpus.names) {
        let n = t.len();
        if n < 2 {
            return Err(Error::invalid(format!("task '{name}' needs at least two examples for a train/test split")));
        }
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut test = idx[..n_test].to_vec();
        test.sort_unstable();
        split.train_pool.push(t.subset(&idx[n_test..]));
        split.test.push(t.subset(&test));
        split.records.push(SplitRecord { seed, task: name.clone(), test });
    }
    Ok(split)
}

fn prefix(t: &TaskDataset, size: usize) -> TaskDataset {
    t.subset(&(0..size.min(t.len())).collect::<Vec<_>>())
}

fn check_size(split: &Split, names: &[String], k: usize, size: usize) -> Result<()> {
    let avail = split.train_pool[k].len();
    if size > avail {
        return Err(Error::invalid(format!("size {size} exceeds the {avail} training examples of task '{}'", names[k])));
    }
    Ok(())
}

/// Fits `method` on `train` and scores the tasks listed in `eval` (indices
/// into `test`). Returns per-task values and the held-out trace.
fn run_cell(
    method: Method,
    train: &[TaskDataset],
    test: &[TaskDataset],
    eval: &[usize],
    metric: Metric,
    opts: &EvalOptions,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (train, test): (Vec<TaskDataset>, Vec<TaskDataset>) = match opts.pca {
        Some(m) => {
            let p = PcaProjection::fit(train, m)?;
            (
                train.iter().map(|t| p.project_task(t)).collect::<Result<_>>()?,
                test.iter().map(|t| p.project_task(t)).collect::<Result<_>>()?,
            )
        }
        None => (train.to_vec(), test.to_vec()),
    };
    let settings = FitSettings { seed, ..opts.settings.clone() };
    let fitted = fit_method(method, &train, &settings)?;
    let values = eval.iter().map(|&k| evaluate_weights(&test[k], &fitted.weights[k], metric)).collect::<Result<Vec<_>>>()?;
    Ok((values, fitted.trace))
}

struct CellOut {
    values: Vec<f64>,
    trace: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn push_cell(
    report: &mut EvalReport,
    method: Method,
    names: &[String],
    eval: &[usize],
    size: usize,
    seed: u64,
    metric_label: &str,
    setting: Option<String>,
    out: CellOut,
    with_macro: bool,
) {
    for (&k, &v) in eval.iter().zip(&out.values) {
        report.rows.push(ReportRow { method: method.to_string(), task: names[k].clone(), size, seed, metric: metric_label.to_string(), value: v });
    }
    if with_macro {
        let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
        report.rows.push(ReportRow {
            method: method.to_string(),
            task: MACRO_TASK.to_string(),
            size,
            seed,
            metric: metric_label.to_string(),
            value: mean,
        });
    }
    if !out.trace.is_empty() {
        report.traces.push(TraceRecord { method: method.to_string(), size, seed, setting, trace: out.trace });
    }
}

/// For every size (per-task training examples), seed and method: subsample,
/// fit, and score every task on its test split. Rows are grouped by size,
/// then seed, then method, each followed by a macro-average row.
pub fn learning_curve(corpus: &MultiTaskCorpus, methods: &[Method], sizes: &[usize], seeds: &[u64], opts: &EvalOptions) -> Result<EvalReport> {
    opts.validate()?;
    let metric = opts.metric_for(corpus)?;
    let splits = seeds.iter().map(|&s| split_corpus(corpus, opts.test_fraction, s)).collect::<Result<Vec<_>>>()?;
    for split in &splits {
        for &size in sizes {
            for k in 0..corpus.num_tasks() {
                check_size(split, &corpus.names, k, size)?;
            }
        }
    }
    let eval: Vec<usize> = (0..corpus.num_tasks()).collect();
    let cells: Vec<(usize, usize, Method)> =
        sizes.iter().enumerate().flat_map(|(i, _)| (0..seeds.len()).flat_map(move |j| methods.iter().map(move |&m| (i, j, m)))).collect();
    let outs = cells
        .par_iter()
        .map(|&(i, j, m)| {
            let train: Vec<TaskDataset> = splits[j].train_pool.iter().map(|t| prefix(t, sizes[i])).collect();
            run_cell(m, &train, &splits[j].test, &eval, metric, opts, seeds[j]).map(|(values, trace)| CellOut { values, trace })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport::default();
    for ((i, j, m), out) in cells.into_iter().zip(outs) {
        push_cell(&mut report, m, &corpus.names, &eval, sizes[i], seeds[j], &metric.to_string(), None, out, true);
    }
    for s in splits {
        report.splits.extend(s.records);
    }
    Ok(report)
}

/// Source tasks keep `source_size` training examples; the target task's
/// training size sweeps `target_sizes`. Only the target is scored.
pub fn target_transfer(
    corpus: &MultiTaskCorpus,
    target: usize,
    source_size: usize,
    target_sizes: &[usize],
    methods: &[Method],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    if target >= corpus.num_tasks() {
        return Err(Error::invalid(format!("target task {target} out of range ({} tasks)", corpus.num_tasks())));
    }
    let metric = opts.metric_for(corpus)?;
    let splits = seeds.iter().map(|&s| split_corpus(corpus, opts.test_fraction, s)).collect::<Result<Vec<_>>>()?;
    for split in &splits {
        for k in 0..corpus.num_tasks() {
            if k != target {
                check_size(split, &corpus.names, k, source_size)?;
            }
        }
        for &size in target_sizes {
            check_size(split, &corpus.names, target, size)?;
        }
    }
    let eval = [target];
    let cells: Vec<(usize, usize, Method)> = target_sizes
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..seeds.len()).flat_map(move |j| methods.iter().map(move |&m| (i, j, m))))
        .collect();
    let outs = cells
        .par_iter()
        .map(|&(i, j, m)| {
            let train: Vec<TaskDataset> = splits[j]
                .train_pool
                .iter()
                .enumerate()
                .map(|(k, t)| prefix(t, if k == target { target_sizes[i] } else { source_size }))
                .collect();
            run_cell(m, &train, &splits[j].test, &eval, metric, opts, seeds[j]).map(|(values, trace)| CellOut { values, trace })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport::default();
    for ((i, j, m), out) in cells.into_iter().zip(outs) {
        push_cell(&mut report, m, &corpus.names, &eval, target_sizes[i], seeds[j], &metric.to_string(), None, out, false);
    }
    for s in splits {
        report.splits.extend(s.records.into_iter().filter(|r| r.task == corpus.names[target]));
    }
    Ok(report)
}

/// A permutation of ⌈p·D⌉ randomly chosen feature columns among themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnScramble {
    /// `perm[i]` is the new column of old column `i`.
    pub perm: Vec<usize>,
}

impl ColumnScramble {
    pub fn sample<R: Rng + ?Sized>(dim: usize, p: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("scramble fraction must lie in [0, 1], got {p}")));
        }
        let m = ((p * dim as f64).ceil() as usize).min(dim);
        let mut cols = index::sample(rng, dim, m).into_vec();
        cols.sort_unstable();
        let mut targets = cols.clone();
        targets.shuffle(rng);
        let mut perm: Vec<usize> = (0..dim).collect();
        for (&c, &t) in cols.iter().zip(&targets) {
            perm[c] = t;
        }
        Ok(ColumnScramble { perm })
    }

    pub fn apply(&self, task: &TaskDataset) -> Result<TaskDataset> {
        if task.dim() != self.perm.len() {
            return Err(Error::Dimension { expected: self.perm.len(), got: task.dim() });
        }
        let x = task.x.map_rows(task.dim(), |row| row.map(|(i, v)| (self.perm[i], v)).collect())?;
        TaskDataset::new(x, task.y.clone(), task.kind, task.task)
    }
}

pub fn scrambled_name(name: &str) -> String {
    format!("{name}-scrambled")
}

/// Appends a copy of task `k` whose ⌈p·D⌉ randomly chosen columns are
/// permuted among themselves.
pub fn scramble_task<R: Rng + ?Sized>(corpus: &MultiTaskCorpus, k: usize, p: f64, rng: &mut R) -> Result<MultiTaskCorpus> {
    let src = corpus.tasks.get(k).ok_or_else(|| Error::invalid(format!("task {k} out of range")))?;
    let scramble = ColumnScramble::sample(corpus.dim, p, rng)?;
    let mut tasks = corpus.tasks.clone();
    tasks.push(scramble.apply(src)?);
    let mut names = corpus.names.clone();
    names.push(scrambled_name(&corpus.names[k]));
    MultiTaskCorpus::new(tasks, names, corpus.kind)
}

/// Label for the metric column of scramble rows: `accuracy@p=0.25`.
pub fn scramble_metric_label(metric: Metric, p: f64) -> String {
    format!("{metric}@p={p}")
}

/// For every seed and fraction `p`: copy task `k`, scramble the copy, fit all
/// tasks, and score every task (the copy included). The copy shares the
/// original's train/test split, so at `p = 0` it is an exact duplicate.
/// `size` caps the per-task training examples.
pub fn scramble_sweep(
    corpus: &MultiTaskCorpus,
    k: usize,
    fractions: &[f64],
    methods: &[Method],
    seeds: &[u64],
    size: Option<usize>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.validate()?;
    if k >= corpus.num_tasks() {
        return Err(Error::invalid(format!("task {k} out of range ({} tasks)", corpus.num_tasks())));
    }
    let metric = opts.metric_for(corpus)?;
    let mut names = corpus.names.clone();
    names.push(scrambled_name(&corpus.names[k]));
    let eval: Vec<usize> = (0..names.len()).collect();

    let mut report = EvalReport::default();
    for &seed in seeds {
        let split = split_corpus(corpus, opts.test_fraction, seed)?;
        if let Some(s) = size {
            for t in 0..corpus.num_tasks() {
                check_size(&split, &corpus.names, t, s)?;
            }
        }
        let base_train: Vec<TaskDataset> = split.train_pool.iter().map(|t| prefix(t, size.unwrap_or(usize::MAX))).collect();
        let variants = fractions
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64 + 1);
                let sc = ColumnScramble::sample(corpus.dim, p, &mut rng)?;
                let mut train = base_train.clone();
                let mut test = split.test.clone();
                let mut copy_train = sc.apply(&base_train[k])?;
                let mut copy_test = sc.apply(&split.test[k])?;
                copy_train.task = train.len();
                copy_test.task = test.len();
                train.push(copy_train);
                test.push(copy_test);
                Ok((train, test))
            })
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<(usize, Method)> = (0..fractions.len()).flat_map(|j| methods.iter().map(move |&m| (j, m))).collect();
        let outs = cells
            .par_iter()
            .map(|&(j, m)| {
                let (train, test) = &variants[j];
                run_cell(m, train, test, &eval, metric, opts, seed).map(|(values, trace)| CellOut { values, trace })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut part = EvalReport::default();
        for ((j, m), out) in cells.into_iter().zip(outs) {
            let n = base_train[k].len();
            let label = scramble_metric_label(metric, fractions[j]);
            let setting = Some(format!("p={}", fractions[j]));
            push_cell(&mut part, m, &names, &eval, n, seed, &label, setting, out, false);
        }
        part.splits = split.records;
        report.extend(part);
    }
    Ok(report)
}

/// Mean of `values` grouped by the distinct keys, in first-seen key order.
pub fn mean_by<K: PartialEq + Clone>(items: impl IntoIterator<Item = (K, f64)>) -> Vec<(K, f64)> {
    let mut acc: Vec<(K, f64, usize)> = Vec::new();
    for (k, v) in items {
        match acc.iter_mut().find(|(a, _, _)| *a == k) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => acc.push((k, v, 1)),
        }
    }
    acc.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect()
}

/// Weights-only view used by drivers that need per-task predictions.
pub fn task_weights(method: Method, train: &[TaskDataset], settings: &FitSettings) -> Result<Vec<DVector<f64>>> {
    Ok(fit_method(method, train, settings)?.weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{SparseRows, TaskKind};
    use nalgebra::DMatrix;

    fn corpus(k: usize, n: usize, d: usize, seed: u64) -> MultiTaskCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let tasks = (0..k)
            .map(|t| {
                let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
                let y = (0..n).map(|r| if x.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() >= 0.0 { 1.0 } else { -1.0 }).collect();
                TaskDataset::from_dense(&x, y, TaskKind::Classification, t).unwrap()
            })
            .collect();
        MultiTaskCorpus::new(tasks, (0..k).map(|t| format!("t{t}")).collect(), Default::default()).unwrap()
    }

    #[test]
    fn scramble_fraction_zero_is_a_copy() {
        let c = corpus(2, 10, 4, 1);
        let s = scramble_task(&c, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.num_tasks(), 3);
        assert_eq!(s.tasks[2].x, c.tasks[1].x);
        assert_eq!(s.names[2], "t1-scrambled");
    }

    #[test]
    fn scramble_moves_columns() {
        let x = DMatrix::from_fn(3, 5, |i, j| (10 * j + i) as f64 + 1.0);
        let t = TaskDataset::from_dense(&x, vec![1.0; 3], TaskKind::Classification, 0).unwrap();
        let sc = ColumnScramble::sample(5, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut sorted = sc.perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let out = sc.apply(&t).unwrap().x.to_dense();
        for (old, &new) in sc.perm.iter().enumerate() {
            assert_eq!(out.column(new), x.column(old));
        }
        let half = ColumnScramble::sample(5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(half.perm.iter().enumerate().filter(|(i, &p)| *i != p).count() <= 3);
        assert!(ColumnScramble::sample(5, 1.5, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn curve_rows_follow_input_order() {
        let c = corpus(2, 30, 3, 2);
        let opts = EvalOptions::default();
        let r = learning_curve(&c, &[Method::Indp, Method::Pool], &[4, 8, 15], &[3], &opts).unwrap();
        // per (size, method): two tasks plus macro
        assert_eq!(r.rows.len(), 3 * 2 * 3);
        let sizes: Vec<usize> = r.rows.iter().map(|x| x.size).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        let again = learning_curve(&c, &[Method::Indp, Method::Pool], &[4, 8, 15], &[3], &opts).unwrap();
        assert_eq!(r.to_csv_string().unwrap(), again.to_csv_string().unwrap());
        assert!(r.to_csv_string().unwrap().starts_with("method,task,size,seed,metric,value\n"));
        assert!(learning_curve(&c, &[Method::Indp], &[16], &[3], &opts).is_err());
    }

    #[test]
    fn scramble_copy_matches_original_at_zero() {
        let c = corpus(3, 24, 4, 5);
        let opts = EvalOptions::default();
        let r = scramble_sweep(&c, 0, &[0.0, 1.0], &[Method::Indp, Method::Pool], &[1, 2], None, &opts).unwrap();
        for m in ["indp", "pool"] {
            for seed in [1, 2] {
                let get = |task: &str| {
                    r.rows.iter().find(|x| x.method == m && x.task == task && x.seed == seed && x.metric == "accuracy@p=0").unwrap().value
                };
                assert_eq!(get("t0"), get("t0-scrambled"));
            }
        }
        // 2 fractions × 2 methods × 4 tasks per seed
        assert_eq!(r.rows.len(), 2 * 2 * 2 * 4);
    }

    #[test]
    fn transfer_with_no_target_data() {
        let c = corpus(3, 20, 3, 6);
        let r = target_transfer(&c, 2, 10, &[0, 5, 10], &[Method::Indp, Method::Coal(crate::da::DaVariant::Diag)], &[0], &EvalOptions::default())
            .unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().all(|x| x.task == "t2" && (0.0..=1.0).contains(&x.value)));
        assert_eq!(r.splits.len(), 1);
    }

    #[test]
    fn pca_cells_run() {
        let c = corpus(2, 20, 4, 7);
        let opts = EvalOptions { pca: Some(2), ..EvalOptions::default() };
        let r = learning_curve(&c, &[Method::Feda], &[10], &[0], &opts).unwrap();
        assert_eq!(r.rows.len(), 3);
    }

    #[test]
    fn means_group_in_order() {
        let m = mean_by([("a", 1.0), ("b", 2.0), ("a", 3.0)]);
        assert_eq!(m, vec![("a", 2.0), ("b", 2.0)]);
    }

    #[test]
    fn tiny_tasks_cannot_be_split() {
        let t = TaskDataset::new(SparseRows::new(2), vec![], TaskKind::Classification, 0).unwrap();
        let c = MultiTaskCorpus::new(vec![t], vec!["x".into()], Default::default()).unwrap();
        assert!(learning_curve(&c, &[Method::Indp], &[0], &[0], &EvalOptions::default()).is_err());
    }
}

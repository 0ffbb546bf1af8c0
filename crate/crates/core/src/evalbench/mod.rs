//! Corpora, baselines, metrics and experiment drivers for comparing methods.

pub mod baselines;
pub mod corpus;
pub mod experiments;
pub mod metrics;
pub mod pca;

pub use baselines::{baseline_feda, baseline_indp, baseline_pool, fit_method, FitSettings, FittedWeights, Method};
pub use corpus::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusKind, MultiTaskCorpus};
pub use experiments::{learning_curve, scramble_sweep, scramble_task, target_transfer, EvalOptions, EvalReport, ReportRow};
pub use metrics::{evaluate_weights, metric_accuracy, metric_auc, metric_r2, Metric};
pub use pca::{pca_project, PcaProjection};

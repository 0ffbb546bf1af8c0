//! Coalescent trees: structure, prior, Gaussian belief propagation and greedy
//! agglomerative reconstruction.

mod bp;
mod greedy;
mod message;
mod newick;
mod prior;
mod tree;

pub use bp::{bp_upward, info_posteriors, leaf_cavities, merge_messages, posterior_marginals, InfoMessage};
pub use greedy::{
    greedy_rate1, greedy_rate1_with, merge_log_score, DiscreteEvidence, GreedyOptions, GreedyResult, PairStats,
};
pub use message::{gaussian_product, Covariance, GaussianMessage};
pub use newick::{parse_newick, to_dot, to_newick};
pub use prior::{coalescent_log_prior, pair_count, sample_coalescent};
pub use tree::{CoalescentTree, TreeNode};

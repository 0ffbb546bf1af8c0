//! Bayesian multitask learning and domain adaptation with a latent coalescent
//! hierarchy over tasks.
//!
//! Tasks sit at the leaves of a binary tree drawn from Kingman's coalescent.
//! In the domain-adaptation model the task weight vectors diffuse down the tree;
//! in the multitask model only their log standard deviations do, with a shared
//! correlation matrix. Both are fitted by EM that alternates per-task
//! (Laplace-approximate) weight posteriors with greedy tree reconstruction.

pub mod coalescent;
pub mod da;
pub mod diffusion;
mod error;
pub mod evalbench;
pub mod fit;
pub mod learners;
pub mod linalg;
pub mod mtl;

pub use coalescent::{CoalescentTree, Covariance, GaussianMessage};
pub use diffusion::{DiffusionKernel, DiscreteKernel};
pub use error::{Error, Result};
pub use learners::{TaskDataset, TaskKind, WeightPosterior};

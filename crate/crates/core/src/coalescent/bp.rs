//! Gaussian belief propagation over a coalescent tree with Brownian branches.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::message::gaussian_product;
use super::{CoalescentTree, Covariance, GaussianMessage};
use crate::diffusion::DiffusionKernel;
use crate::error::{Error, Result};
use crate::linalg;

fn check_inputs(tree: &CoalescentTree, leaf_messages: &[GaussianMessage], kernel: &DiffusionKernel) -> Result<()> {
    if leaf_messages.len() != tree.num_leaves() {
        return Err(Error::Dimension { expected: tree.num_leaves(), got: leaf_messages.len() });
    }
    for m in leaf_messages {
        if m.dim() != kernel.dim() {
            return Err(Error::Dimension { expected: kernel.dim(), got: m.dim() });
        }
    }
    Ok(())
}

/// Merges two child messages into the message of their parent at time
/// `t_parent`: each child is diffused over its branch and the two Gaussians
/// are multiplied.
pub fn merge_messages(
    left: &GaussianMessage,
    t_left: f64,
    right: &GaussianMessage,
    t_right: f64,
    t_parent: f64,
    kernel: &DiffusionKernel,
    node: usize,
) -> Result<GaussianMessage> {
    let lam = kernel.covariance();
    let l = left.diffuse(lam, t_left - t_parent);
    let r = right.diffuse(lam, t_right - t_parent);
    gaussian_product(&l, &r, node)
}

/// Upward (leaves-to-root) pass. Returns one message per node, indexed by node id;
/// leaf entries are the supplied messages.
pub fn bp_upward(
    tree: &CoalescentTree,
    leaf_messages: &[GaussianMessage],
    kernel: &DiffusionKernel,
) -> Result<Vec<GaussianMessage>> {
    check_inputs(tree, leaf_messages, kernel)?;
    let mut up: Vec<GaussianMessage> = leaf_messages.to_vec();
    for i in tree.internal_nodes() {
        let ch = tree.children(i);
        let (l, r) = (ch[0], ch[1]);
        let msg = merge_messages(&up[l], tree.time(l), &up[r], tree.time(r), tree.time(i), kernel, i)?;
        up.push(msg);
    }
    Ok(up)
}

/// Posterior marginal at every node given the leaf messages, the Brownian
/// kernel and a prior on the root (`None` = flat).
pub fn posterior_marginals(
    tree: &CoalescentTree,
    leaf_messages: &[GaussianMessage],
    kernel: &DiffusionKernel,
    root_prior: Option<&GaussianMessage>,
) -> Result<Vec<GaussianMessage>> {
    let up = bp_upward(tree, leaf_messages, kernel)?;
    if let Some(p) = root_prior {
        if p.dim() != kernel.dim() {
            return Err(Error::Dimension { expected: kernel.dim(), got: p.dim() });
        }
    }
    let lam = kernel.covariance();
    let n = tree.num_nodes();
    let mut outside: Vec<Option<GaussianMessage>> = vec![None; n];
    outside[tree.root()] = root_prior.cloned();
    for i in tree.internal_nodes().rev() {
        let ch = tree.children(i);
        for (c, s) in [(ch[0], ch[1]), (ch[1], ch[0])] {
            let sib = up[s].diffuse(lam, tree.time(s) - tree.time(i));
            let base = match &outside[i] {
                None => sib,
                Some(o) => gaussian_product(o, &sib, i)?,
            };
            outside[c] = Some(base.diffuse(lam, tree.time(c) - tree.time(i)));
        }
    }
    up.iter()
        .zip(outside)
        .enumerate()
        .map(|(i, (u, o))| match o {
            None => Ok(u.clone()),
            Some(o) => gaussian_product(&o, u, i),
        })
        .collect()
}

/// Gaussian evidence in information form: `exp(-½ xᵀJx + hᵀx)`. `J` may be
/// singular (improper evidence, e.g. a task with fewer examples than features).
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMessage {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl InfoMessage {
    pub fn zeros(d: usize) -> Self {
        InfoMessage { precision: DMatrix::zeros(d, d), shift: DVector::zeros(d) }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Information form of a proper Gaussian; fails on singular covariance.
    pub fn from_moments(msg: &GaussianMessage, node: usize) -> Result<Self> {
        let precision = linalg::spd_inverse(&msg.var.to_full())
            .ok_or_else(|| Error::numerical(node, "covariance is not invertible"))?;
        let shift = &precision * &msg.mean;
        Ok(InfoMessage { precision, shift })
    }

    /// Moment form; requires a positive-definite precision.
    pub fn to_moments(&self, node: usize) -> Result<GaussianMessage> {
        let chol = linalg::cholesky(&self.precision)
            .ok_or_else(|| Error::numerical(node, "precision is not positive definite"))?;
        let mean = chol.solve(&self.shift);
        let var = linalg::symmetrize(&chol.inverse());
        Ok(GaussianMessage { mean, var: Covariance::Full(var) })
    }

    fn add(&self, other: &InfoMessage) -> InfoMessage {
        InfoMessage { precision: &self.precision + &other.precision, shift: &self.shift + &other.shift }
    }

    /// Message on the other end of a Brownian branch of length `t`:
    /// `J' = (I + J tΛ)^{-1} J`, `h' = (I + J tΛ)^{-1} h`.
    fn diffuse(&self, lam: &DMatrix<f64>, t: f64, node: usize) -> Result<InfoMessage> {
        let d = self.dim();
        let m = DMatrix::identity(d, d) + &self.precision * lam * t;
        let lu = m.lu();
        let precision = lu
            .solve(&self.precision)
            .ok_or_else(|| Error::numerical(node, "branch propagation is singular"))?;
        let shift = lu.solve(&self.shift).ok_or_else(|| Error::numerical(node, "branch propagation is singular"))?;
        Ok(InfoMessage { precision: linalg::symmetrize(&precision), shift })
    }
}

/// For every leaf, the Gaussian over its value implied by the root prior and
/// the evidence at all *other* leaves (the leaf's own evidence excluded).
pub fn leaf_cavities(
    tree: &CoalescentTree,
    evidence: &[InfoMessage],
    kernel: &DiffusionKernel,
    root_prior: Option<&GaussianMessage>,
) -> Result<Vec<GaussianMessage>> {
    let (_, outside) = info_passes(tree, evidence, kernel, root_prior)?;
    (0..tree.num_leaves())
        .into_par_iter()
        .map(|k| outside[k].to_moments(k))
        .collect()
}

/// Posterior at every node from information-form leaf evidence.
pub fn info_posteriors(
    tree: &CoalescentTree,
    evidence: &[InfoMessage],
    kernel: &DiffusionKernel,
    root_prior: Option<&GaussianMessage>,
) -> Result<Vec<GaussianMessage>> {
    let (up, outside) = info_passes(tree, evidence, kernel, root_prior)?;
    up.iter().zip(&outside).enumerate().map(|(i, (u, o))| u.add(o).to_moments(i)).collect()
}

fn info_passes(
    tree: &CoalescentTree,
    evidence: &[InfoMessage],
    kernel: &DiffusionKernel,
    root_prior: Option<&GaussianMessage>,
) -> Result<(Vec<InfoMessage>, Vec<InfoMessage>)> {
    let d = kernel.dim();
    if evidence.len() != tree.num_leaves() {
        return Err(Error::Dimension { expected: tree.num_leaves(), got: evidence.len() });
    }
    if let Some(e) = evidence.iter().find(|e| e.dim() != d) {
        return Err(Error::Dimension { expected: d, got: e.dim() });
    }
    let lam = kernel.to_full_matrix();
    let mut up: Vec<InfoMessage> = evidence.to_vec();
    for i in tree.internal_nodes() {
        let mut acc = InfoMessage::zeros(d);
        for &c in tree.children(i) {
            acc = acc.add(&up[c].diffuse(&lam, tree.time(c) - tree.time(i), i)?);
        }
        up.push(acc);
    }
    let n = tree.num_nodes();
    let mut outside = vec![InfoMessage::zeros(d); n];
    if let Some(p) = root_prior {
        outside[tree.root()] = InfoMessage::from_moments(p, tree.root())?;
    }
    for i in tree.internal_nodes().rev() {
        let ch = tree.children(i);
        for (c, s) in [(ch[0], ch[1]), (ch[1], ch[0])] {
            let base = outside[i].add(&up[s].diffuse(&lam, tree.time(s) - tree.time(i), i)?);
            outside[c] = base.diffuse(&lam, tree.time(c) - tree.time(i), c)?;
        }
    }
    Ok((up, outside))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(mean: f64, var: f64) -> GaussianMessage {
        GaussianMessage::new(DVector::from_vec(vec![mean]), Covariance::Diag(DVector::from_vec(vec![var]))).unwrap()
    }

    fn unit() -> DiffusionKernel {
        DiffusionKernel::isotropic(1, 1.0).unwrap()
    }

    #[test]
    fn symmetric_point_masses_average() {
        let tree = CoalescentTree::from_merges(2, &[(0, 1, -1.0)]).unwrap();
        let up = bp_upward(&tree, &[scalar(0.0, 0.0), scalar(2.0, 0.0)], &unit()).unwrap();
        assert!((up[2].mean[0] - 1.0).abs() < 1e-15);
        assert!((up[2].var.diagonal()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_merge() {
        let tree = CoalescentTree::from_merges(2, &[(0, 1, -1.0)]).unwrap();
        let up = bp_upward(&tree, &[scalar(0.0, 1.0), scalar(3.0, 0.0)], &unit()).unwrap();
        assert!((up[2].mean[0] - 2.0).abs() < 1e-15);
        assert!((up[2].var.diagonal()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_leaf_flat_prior_unchanged() {
        let tree = CoalescentTree::single_leaf();
        let msg = scalar(1.3, 0.2);
        let post = posterior_marginals(&tree, std::slice::from_ref(&msg), &unit(), None).unwrap();
        assert_eq!(post[0], msg);
    }

    #[test]
    fn point_mass_leaves_keep_their_value() {
        let tree = CoalescentTree::from_merges(3, &[(0, 1, -0.5), (3, 2, -1.5)]).unwrap();
        let leaves = [scalar(0.0, 0.0), scalar(1.0, 0.0), scalar(-2.0, 0.0)];
        let post = posterior_marginals(&tree, &leaves, &unit(), Some(&scalar(0.0, 4.0))).unwrap();
        for k in 0..3 {
            assert!((post[k].mean[0] - leaves[k].mean[0]).abs() < 1e-14);
            assert!(post[k].var.diagonal()[0].abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_message_count() {
        let tree = CoalescentTree::from_merges(2, &[(0, 1, -1.0)]).unwrap();
        assert!(bp_upward(&tree, &[scalar(0.0, 1.0)], &unit()).is_err());
    }

    #[test]
    fn info_and_moment_routes_agree() {
        let tree = CoalescentTree::from_merges(3, &[(0, 1, -0.3), (3, 2, -1.1)]).unwrap();
        let leaves = [scalar(0.4, 0.5), scalar(-1.0, 2.0), scalar(2.0, 0.25)];
        let prior = scalar(0.1, 3.0);
        let moment = posterior_marginals(&tree, &leaves, &unit(), Some(&prior)).unwrap();
        let evidence: Vec<_> = leaves.iter().map(|m| InfoMessage::from_moments(m, 0).unwrap()).collect();
        let info = info_posteriors(&tree, &evidence, &unit(), Some(&prior)).unwrap();
        for (a, b) in moment.iter().zip(&info) {
            assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
            assert!((a.var.diagonal()[0] - b.var.diagonal()[0]).abs() < 1e-12);
        }
    }
}

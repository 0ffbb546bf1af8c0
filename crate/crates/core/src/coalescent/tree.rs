use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node of a coalescent tree. Leaves sit at time 0 and carry the task index;
/// internal nodes have exactly two children and a strictly negative time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub time: f64,
    pub leaf: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Binary tree produced by a K-coalescent.
///
/// Node ids are canonical: leaves are `0..K` (id equals task index) and the
/// internal node created by the i-th coalescent event (backward in time) has id
/// `K + i - 1`, so the root is always the last node. Because every child is
/// created before its parent, ascending id order is a post-order traversal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescentTree {
    nodes: Vec<TreeNode>,
    num_leaves: usize,
}

impl CoalescentTree {
    /// Builds a tree from a sequence of merge events. Each event joins two
    /// currently-active lineages (by node id) at the given time; times must be
    /// strictly decreasing. The new node receives id `k + event_index`.
    pub fn from_merges(k: usize, merges: &[(usize, usize, f64)]) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidTree("tree needs at least one leaf".into()));
        }
        if merges.len() + 1 != k {
            return Err(Error::InvalidTree(format!(
                "{} leaves need {} merges, got {}",
                k,
                k - 1,
                merges.len()
            )));
        }
        let mut nodes: Vec<TreeNode> = (0..k)
            .map(|i| TreeNode { id: i, parent: None, children: Vec::new(), time: 0.0, leaf: Some(i) })
            .collect();
        for (e, &(a, b, t)) in merges.iter().enumerate() {
            let id = k + e;
            for c in [a, b] {
                let node = nodes
                    .get(c)
                    .ok_or_else(|| Error::InvalidTree(format!("merge {e} references unknown node {c}")))?;
                if node.parent.is_some() {
                    return Err(Error::InvalidTree(format!("node {c} merged twice")));
                }
            }
            if a == b {
                return Err(Error::InvalidTree(format!("merge {e} joins node {a} with itself")));
            }
            nodes[a].parent = Some(id);
            nodes[b].parent = Some(id);
            nodes.push(TreeNode { id, parent: None, children: vec![a, b], time: t, leaf: None });
        }
        let tree = CoalescentTree { nodes, num_leaves: k };
        tree.validate()?;
        Ok(tree)
    }

    /// A tree with a single leaf (which is also the root).
    pub fn single_leaf() -> Self {
        CoalescentTree {
            nodes: vec![TreeNode { id: 0, parent: None, children: Vec::new(), time: 0.0, leaf: Some(0) }],
            num_leaves: 1,
        }
    }

    /// Builds a tree with the given topology and coalescence times from an
    /// arbitrary node list, renumbering into canonical order (internal nodes
    /// sorted by decreasing time). Leaves are identified by their `leaf` label.
    pub fn from_unordered(nodes: &[TreeNode]) -> Result<Self> {
        let leaves: Vec<&TreeNode> = nodes.iter().filter(|n| n.children.is_empty()).collect();
        let k = leaves.len();
        if k == 0 || nodes.len() != 2 * k - 1 {
            return Err(Error::InvalidTree(format!(
                "{} nodes cannot form a binary tree over {} leaves",
                nodes.len(),
                k
            )));
        }
        let mut new_id = vec![usize::MAX; nodes.len()];
        let mut seen = vec![false; k];
        for (pos, n) in nodes.iter().enumerate() {
            if n.children.is_empty() {
                let label = n.leaf.ok_or_else(|| Error::InvalidTree("leaf without task label".into()))?;
                if label >= k || seen[label] {
                    return Err(Error::InvalidTree(format!("leaf labels must be a permutation of 0..{k}")));
                }
                seen[label] = true;
                new_id[pos] = label;
            }
        }
        let mut internal: Vec<usize> = (0..nodes.len()).filter(|&p| !nodes[p].children.is_empty()).collect();
        // Stable sort keeps input order on exact ties; validation rejects ties anyway.
        internal.sort_by(|&a, &b| nodes[b].time.partial_cmp(&nodes[a].time).unwrap_or(std::cmp::Ordering::Equal));
        let mut merges = Vec::with_capacity(k - 1);
        for (e, &p) in internal.iter().enumerate() {
            new_id[p] = k + e;
        }
        for &p in &internal {
            let ch = &nodes[p].children;
            if ch.len() != 2 {
                return Err(Error::InvalidTree(format!("internal node has {} children", ch.len())));
            }
            let a = *new_id.get(ch[0]).ok_or_else(|| Error::InvalidTree("bad child index".into()))?;
            let b = *new_id.get(ch[1]).ok_or_else(|| Error::InvalidTree("bad child index".into()))?;
            merges.push((a, b, nodes[p].time));
        }
        if k == 1 {
            return Ok(Self::single_leaf());
        }
        Self::from_merges(k, &merges)
    }

    /// Checks every structural and temporal invariant.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_leaves;
        let bad = |m: String| Err(Error::InvalidTree(m));
        if k == 0 || self.nodes.len() != 2 * k - 1 {
            return bad(format!("expected {} nodes, found {}", 2 * k - 1, self.nodes.len()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node at position {i} has id {}", n.id));
            }
            if i < k {
                if !n.children.is_empty() || n.leaf != Some(i) || n.time != 0.0 {
                    return bad(format!("leaf {i} must have no children, label {i} and time 0"));
                }
            } else {
                if n.children.len() != 2 || n.leaf.is_some() {
                    return bad(format!("internal node {i} must have exactly two children and no label"));
                }
                if !(n.time < 0.0) || !n.time.is_finite() {
                    return bad(format!("internal node {i} has non-negative time {}", n.time));
                }
                if i > k && !(n.time < self.nodes[i - 1].time) {
                    return bad(format!("event times must strictly decrease (node {i})"));
                }
                for &c in &n.children {
                    if c >= i || self.nodes[c].parent != Some(i) {
                        return bad(format!("inconsistent parent link between {i} and {c}"));
                    }
                    if !(n.time < self.nodes[c].time) {
                        return bad(format!("node {i} is not older than its child {c}"));
                    }
                }
            }
            match n.parent {
                None if i + 1 != self.nodes.len() => return bad(format!("node {i} has no parent but is not the root")),
                Some(p) if p >= self.nodes.len() || !self.nodes[p].children.contains(&i) => {
                    return bad(format!("node {i} points to a parent that does not list it"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn time(&self, id: usize) -> f64 {
        self.nodes[id].time
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        id < self.num_leaves
    }

    /// Internal node ids in event order (most recent first).
    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        self.num_leaves..self.nodes.len()
    }

    /// Length of the branch above `id` (`t_id - t_parent`), zero for the root.
    pub fn branch_length(&self, id: usize) -> f64 {
        match self.nodes[id].parent {
            Some(p) => self.nodes[id].time - self.nodes[p].time,
            None => 0.0,
        }
    }

    /// Inter-event durations δ_i = t_{i-1} - t_i, with t_0 = 0.
    pub fn durations(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.internal_nodes()
            .map(|i| {
                let d = prev - self.nodes[i].time;
                prev = self.nodes[i].time;
                d
            })
            .collect()
    }

    /// Same topology with new inter-event durations.
    pub fn with_durations(&self, durations: &[f64]) -> Result<Self> {
        if durations.len() + 1 != self.num_leaves {
            return Err(Error::invalid(format!(
                "expected {} durations, got {}",
                self.num_leaves - 1,
                durations.len()
            )));
        }
        let mut t = 0.0;
        let merges: Vec<_> = self
            .internal_nodes()
            .zip(durations)
            .map(|(i, d)| {
                t -= d;
                let c = &self.nodes[i].children;
                (c[0], c[1], t)
            })
            .collect();
        Self::from_merges(self.num_leaves, &merges)
    }

    /// Sorted task indices below `id`.
    pub fn leaf_set(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(n);
            } else {
                stack.extend_from_slice(&self.nodes[n].children);
            }
        }
        out.sort_unstable();
        out
    }

    /// Smallest task index in the subtree rooted at `id`.
    pub fn min_leaf(&self, id: usize) -> usize {
        self.leaf_set(id)[0]
    }

    /// Leaf sets of every internal node; two trees have the same rooted
    /// topology exactly when their clade sets agree.
    pub fn clades(&self) -> BTreeSet<Vec<usize>> {
        self.internal_nodes().map(|i| self.leaf_set(i)).collect()
    }

    /// The two leaf sets separated by the root, ordered by smallest task index.
    pub fn root_split(&self) -> (Vec<usize>, Vec<usize>) {
        let root = self.root();
        if self.is_leaf(root) {
            return (vec![root], Vec::new());
        }
        let mut a = self.leaf_set(self.nodes[root].children[0]);
        let mut b = self.leaf_set(self.nodes[root].children[1]);
        if b[0] < a[0] {
            std::mem::swap(&mut a, &mut b);
        }
        (a, b)
    }

    /// Children of `id` ordered by smallest descendant task index.
    pub fn ordered_children(&self, id: usize) -> Vec<usize> {
        let mut ch = self.nodes[id].children.clone();
        ch.sort_by_key(|&c| self.min_leaf(c));
        ch
    }

    /// The sequence of merged leaf-set pairs, one entry per event; identifies
    /// the ranked labelled history independently of node numbering.
    pub fn ranked_history(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.internal_nodes()
            .map(|i| {
                let ch = self.ordered_children(i);
                (self.leaf_set(ch[0]), self.leaf_set(ch[1]))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> CoalescentTree {
        CoalescentTree::from_merges(3, &[(0, 1, -0.5), (3, 2, -2.5)]).unwrap()
    }

    #[test]
    fn durations_and_branches() {
        let t = three();
        assert_eq!(t.durations(), vec![0.5, 2.0]);
        assert_eq!(t.branch_length(0), 0.5);
        assert_eq!(t.branch_length(2), 2.5);
        assert_eq!(t.branch_length(3), 2.0);
        assert_eq!(t.root(), 4);
        assert_eq!(t.root_split(), (vec![0, 1], vec![2]));
    }

    #[test]
    fn rejects_bad_times() {
        assert!(CoalescentTree::from_merges(3, &[(0, 1, -0.5), (3, 2, -0.5)]).is_err());
        assert!(CoalescentTree::from_merges(2, &[(0, 1, 0.0)]).is_err());
        assert!(CoalescentTree::from_merges(3, &[(0, 1, -0.5), (0, 2, -1.0)]).is_err());
        assert!(CoalescentTree::from_merges(3, &[(0, 1, -0.5)]).is_err());
    }

    #[test]
    fn unordered_round_trip() {
        let t = three();
        let mut shuffled: Vec<TreeNode> = t.nodes().to_vec();
        shuffled.reverse();
        // remap ids after reversal
        let n = shuffled.len();
        for node in &mut shuffled {
            node.children = node.children.iter().map(|c| n - 1 - c).collect();
        }
        let back = CoalescentTree::from_unordered(&shuffled).unwrap();
        assert_eq!(back.clades(), t.clades());
        assert_eq!(back.durations(), t.durations());
    }

    #[test]
    fn with_durations_keeps_topology() {
        let t = three();
        let u = t.with_durations(&[5.0, 7.0]).unwrap();
        assert_eq!(u.clades(), t.clades());
        assert_eq!(u.time(4), -12.0);
    }
}

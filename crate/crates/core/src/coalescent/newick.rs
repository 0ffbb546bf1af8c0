//! Newick and DOT serialization of coalescent trees.
//!
//! Output is deterministic: the children of every node are written in order of
//! their smallest descendant task index, and branch lengths use Rust's
//! shortest round-trip float formatting.

use std::fmt::Write as _;

use super::{CoalescentTree, TreeNode};
use crate::error::{Error, Result};

fn leaf_label(id: usize, labels: Option<&[String]>) -> String {
    labels.and_then(|l| l.get(id).cloned()).unwrap_or_else(|| id.to_string())
}

/// Newick string with branch lengths; leaves are labelled by task index, or by
/// `labels[task]` when given.
pub fn to_newick(tree: &CoalescentTree, labels: Option<&[String]>) -> String {
    let mut out = String::new();
    write_node(tree, tree.root(), labels, &mut out);
    out.push(';');
    out
}

fn write_node(tree: &CoalescentTree, id: usize, labels: Option<&[String]>, out: &mut String) {
    if tree.is_leaf(id) {
        out.push_str(&leaf_label(id, labels));
    } else {
        out.push('(');
        for (i, c) in tree.ordered_children(id).into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_node(tree, c, labels, out);
        }
        out.push(')');
    }
    if tree.parent(id).is_some() {
        let _ = write!(out, ":{}", tree.branch_length(id));
    }
}

/// Graphviz rendering with node times as labels.
pub fn to_dot(tree: &CoalescentTree, labels: Option<&[String]>) -> String {
    let mut out = String::from("digraph coalescent {\n  rankdir=TB;\n");
    for id in 0..tree.num_nodes() {
        if tree.is_leaf(id) {
            let _ = writeln!(out, "  n{id} [shape=box,label=\"{} (t=0)\"];", leaf_label(id, labels).replace('"', "\\\""));
        } else {
            let _ = writeln!(out, "  n{id} [shape=ellipse,label=\"t={}\"];", tree.time(id));
        }
    }
    for id in tree.internal_nodes() {
        for c in tree.ordered_children(id) {
            let _ = writeln!(out, "  n{id} -> n{c} [label=\"{}\"];", tree.branch_length(c));
        }
    }
    out.push_str("}\n");
    out
}

/// Parses a binary ultrametric Newick tree. Leaf labels that form a
/// permutation of `0..K` are used as task indices; otherwise leaves are
/// numbered in order of appearance. Returns the tree and the leaf labels by
/// task index.
pub fn parse_newick(s: &str) -> Result<(CoalescentTree, Vec<String>)> {
    let mut p = Parser { chars: s.trim().chars().collect(), pos: 0, nodes: Vec::new(), lengths: Vec::new(), labels: Vec::new() };
    let root = p.node()?;
    p.skip_ws();
    if p.peek() != Some(';') {
        return Err(Error::data(None, format!("expected ';' at position {}", p.pos)));
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != p.chars.len() {
        return Err(Error::data(None, "trailing characters after ';'"));
    }

    let leaf_positions: Vec<usize> = (0..p.nodes.len()).filter(|&i| p.nodes[i].children.is_empty()).collect();
    let k = leaf_positions.len();
    let numeric: Option<Vec<usize>> = leaf_positions.iter().map(|&i| p.labels[i].parse::<usize>().ok()).collect();
    let use_numeric = match &numeric {
        Some(ids) => {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.iter().enumerate().all(|(i, &v)| i == v)
        }
        None => false,
    };
    let mut names = vec![String::new(); k];
    for (order, &pos) in leaf_positions.iter().enumerate() {
        let task = if use_numeric { numeric.as_ref().unwrap()[order] } else { order };
        p.nodes[pos].leaf = Some(task);
        names[task] = p.labels[pos].clone();
    }

    // depth from the root, then time = depth - leaf depth
    let n = p.nodes.len();
    let mut depth = vec![0.0; n];
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        for &c in &p.nodes[i].children.clone() {
            let len = p.lengths[c].ok_or_else(|| Error::data(None, "every non-root branch needs a length"))?;
            if !(len > 0.0) {
                return Err(Error::data(None, format!("branch lengths must be positive, got {len}")));
            }
            depth[c] = depth[i] + len;
            stack.push(c);
        }
    }
    let leaf_depths: Vec<f64> = leaf_positions.iter().map(|&i| depth[i]).collect();
    let height = leaf_depths.iter().sum::<f64>() / k as f64;
    let tol = 1e-9 * height.abs().max(1.0);
    if leaf_depths.iter().any(|d| (d - height).abs() > tol) {
        return Err(Error::data(None, "tree is not ultrametric (leaves at different depths)"));
    }
    for (node, d) in p.nodes.iter_mut().zip(&depth) {
        node.time = if node.children.is_empty() { 0.0 } else { (d - height).min(-f64::MIN_POSITIVE) };
    }
    let tree = CoalescentTree::from_unordered(&p.nodes).map_err(|e| Error::data(None, e.to_string()))?;
    Ok((tree, names))
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    nodes: Vec<TreeNode>,
    lengths: Vec<Option<f64>>,
    labels: Vec<String>,
}

impl Parser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn node(&mut self) -> Result<usize> {
        self.skip_ws();
        let mut children = Vec::new();
        if self.peek() == Some('(') {
            self.pos += 1;
            loop {
                children.push(self.node()?);
                self.skip_ws();
                match self.peek() {
                    Some(',') => self.pos += 1,
                    Some(')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(Error::data(None, format!("expected ',' or ')' at position {}", self.pos))),
                }
            }
            if children.len() != 2 {
                return Err(Error::data(None, format!("coalescent trees are binary; found {} children", children.len())));
            }
        }
        let label = self.token();
        if children.is_empty() && label.is_empty() {
            return Err(Error::data(None, format!("leaf without label at position {}", self.pos)));
        }
        self.skip_ws();
        let length = if self.peek() == Some(':') {
            self.pos += 1;
            let tok = self.token();
            Some(tok.parse::<f64>().map_err(|_| Error::data(None, format!("bad branch length '{tok}'")))?)
        } else {
            None
        };
        let id = self.nodes.len();
        for &c in &children {
            self.nodes[c].parent = Some(id);
        }
        self.nodes.push(TreeNode { id, parent: None, children, time: 0.0, leaf: None });
        self.lengths.push(length);
        self.labels.push(label);
        Ok(id)
    }

    fn token(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| !matches!(c, '(' | ')' | ',' | ':' | ';') && !c.is_whitespace()) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_expected_string() {
        let t = CoalescentTree::from_merges(3, &[(1, 0, -0.5), (2, 3, -2.5)]).unwrap();
        assert_eq!(to_newick(&t, None), "((0:0.5,1:0.5):2,2:2.5);");
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert_eq!(to_newick(&t, Some(&names)), "((a:0.5,b:0.5):2,c:2.5);");
    }

    #[test]
    fn parse_round_trip() {
        let t = CoalescentTree::from_merges(4, &[(2, 3, -0.25), (0, 1, -1.0), (4, 5, -3.0)]).unwrap();
        let s = to_newick(&t, None);
        let (back, names) = parse_newick(&s).unwrap();
        assert_eq!(back.ranked_history(), t.ranked_history());
        for i in 0..t.num_nodes() {
            assert_eq!(back.time(i), t.time(i));
        }
        assert_eq!(names, vec!["0", "1", "2", "3"]);
    }

    #[test]
    fn parse_named_leaves() {
        let (t, names) = parse_newick("((books:1,dvd:1):2,kitchen:3);").unwrap();
        assert_eq!(names, vec!["books", "dvd", "kitchen"]);
        assert_eq!(t.leaf_set(3), vec![0, 1]);
        assert_eq!(t.time(4), -3.0);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_newick("((a:1,b:1):1,c:1);").is_err()); // not ultrametric
        assert!(parse_newick("(a:1,b:1,c:1);").is_err()); // not binary
        assert!(parse_newick("(a:1,b:1)").is_err()); // missing ';'
        assert!(parse_newick("(a:1,b:x);").is_err());
    }

    #[test]
    fn dot_mentions_every_node() {
        let t = CoalescentTree::from_merges(2, &[(0, 1, -1.5)]).unwrap();
        let dot = to_dot(&t, None);
        assert!(dot.contains("n2 [shape=ellipse,label=\"t=-1.5\"]"));
        assert!(dot.contains("n2 -> n0"));
        assert!(dot.contains("n2 -> n1"));
    }
}

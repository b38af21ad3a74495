//! The disease concept graph.
//!
//! Records are read from a JSON Lines file (one flat object per line with
//! keys `ui`, `heading`, `scope_note`, `tree_numbers`, `entry_terms`). Nodes
//! are indexed in lexicographic order of their unique id, and edges come
//! from tree numbers: each tree number is linked to the node owning its
//! longest strict prefix that exists in the file. The stored graph is
//! undirected and free of self-edges; self-loops only appear when an
//! [`Adjacency`] is exported for graph convolution.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use taxolink_numerics::Tensor;

use crate::error::{Error, Result};

/// Size of the disease branch (category C descriptors) of the full vocabulary.
pub const FULL_DISEASE_CONCEPT_COUNT: usize = 10_923;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptNode {
    #[serde(rename = "ui")]
    pub unique_id: String,
    pub heading: String,
    pub scope_note: String,
    pub tree_numbers: Vec<String>,
    pub entry_terms: Vec<String>,
}

fn valid_tree_number(t: &str) -> bool {
    !t.is_empty()
        && t
            .split('.')
            .all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    nodes: Vec<ConceptNode>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Taxonomy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut nodes = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let node: ConceptNode =
                serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            nodes.push(node);
        }
        Self::from_nodes(nodes)
    }

    /// Builds a taxonomy realizing an arbitrary undirected graph on `n` nodes.
    ///
    /// Node `i` gets id `N{i:05}` (so node indices equal `i`) and a root tree
    /// number `R{i:05}`; each edge `(u, v)` with `u < v` gives `v` the extra
    /// tree number `R{u:05}.E{v:05}`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut trees: Vec<BTreeSet<String>> =
            (0..n).map(|i| BTreeSet::from([format!("R{i:05}")])).collect();
        for &(a, b) in edges {
            let (u, v) = (a.min(b), a.max(b));
            if v >= n || u == v {
                return Err(Error::Integrity(format!("invalid edge ({a}, {b}) for {n} nodes")));
            }
            trees[v].insert(format!("R{u:05}.E{v:05}"));
        }
        let nodes = trees
            .into_iter()
            .enumerate()
            .map(|(i, t)| ConceptNode {
                unique_id: format!("N{i:05}"),
                heading: format!("node {i}"),
                scope_note: String::new(),
                tree_numbers: t.into_iter().collect(),
                entry_terms: Vec::new(),
            })
            .collect();
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(mut nodes: Vec<ConceptNode>) -> Result<Self> {
        nodes.sort_by(|a, b| a.unique_id.cmp(&b.unique_id));
        let mut index = HashMap::with_capacity(nodes.len());
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.unique_id.is_empty() {
                return Err(Error::Integrity("concept with empty unique id".into()));
            }
            if index.insert(node.unique_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate unique id `{}`",
                    node.unique_id
                )));
            }
            if node.tree_numbers.is_empty() {
                return Err(Error::Integrity(format!(
                    "concept `{}` has no tree number",
                    node.unique_id
                )));
            }
            for t in &node.tree_numbers {
                if !valid_tree_number(t) {
                    return Err(Error::Integrity(format!(
                        "concept `{}` has malformed tree number `{t}`",
                        node.unique_id
                    )));
                }
                if let Some(prev) = owner.insert(t.as_str(), i) {
                    if prev != i {
                        return Err(Error::Integrity(format!(
                            "tree number `{t}` owned by both `{}` and `{}`",
                            nodes[prev].unique_id, node.unique_id
                        )));
                    }
                }
            }
        }

        let n = nodes.len();
        let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut children: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (child, node) in nodes.iter().enumerate() {
            for t in &node.tree_numbers {
                let mut prefix = t.as_str();
                while let Some(cut) = prefix.rfind('.') {
                    prefix = &prefix[..cut];
                    if let Some(&parent) = owner.get(prefix) {
                        if parent != child {
                            parents[child].insert(parent);
                            children[parent].insert(child);
                        }
                        break;
                    }
                }
            }
        }
        let neighbors = (0..n)
            .map(|v| {
                parents[v]
                    .union(&children[v])
                    .copied()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        Ok(Self {
            nodes,
            index,
            neighbors,
            parents: parents.into_iter().map(|s| s.into_iter().collect()).collect(),
            children: children.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &ConceptNode {
        &self.nodes[index]
    }

    pub fn id(&self, index: usize) -> &str {
        &self.nodes[index].unique_id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }

    /// Neighbour ids in ascending node-index order.
    pub fn neighbors(&self, id: &str) -> Result<Vec<&str>> {
        let v = self.require(id)?;
        Ok(self.neighbors[v].iter().map(|&u| self.id(u)).collect())
    }

    pub fn neighbor_indices(&self, index: usize) -> &[usize] {
        &self.neighbors[index]
    }

    pub fn parent_indices(&self, index: usize) -> &[usize] {
        &self.parents[index]
    }

    pub fn child_indices(&self, index: usize) -> &[usize] {
        &self.children[index]
    }

    /// Undirected edges as `(low, high)` index pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (v, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&u| u > v).map(|&u| (v, u)));
        }
        out
    }

    pub fn adjacency(&self, self_loops: bool) -> Adjacency {
        let lists = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(v, ns)| {
                let mut l = ns.clone();
                if self_loops {
                    let pos = l.partition_point(|&u| u < v);
                    l.insert(pos, v);
                }
                l
            })
            .collect();
        Adjacency { lists }
    }

    /// Symmetric 0/1 adjacency matrix with unit diagonal.
    pub fn adjacency_with_self_loops(&self) -> Tensor {
        self.adjacency(true).to_dense()
    }

    /// Hop count on the undirected graph, `None` when disconnected.
    pub fn hop_distance(&self, from: usize, to: usize) -> Option<usize> {
        if from == to {
            return Some(0);
        }
        let mut dist = vec![usize::MAX; self.len()];
        let mut queue = VecDeque::from([from]);
        dist[from] = 0;
        while let Some(v) = queue.pop_front() {
            for &u in &self.neighbors[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    if u == to {
                        return Some(dist[u]);
                    }
                    queue.push_back(u);
                }
            }
        }
        None
    }

    /// True when `ancestor` is reachable from `node` by following parent links.
    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = self.parents[node].clone();
        while let Some(p) = stack.pop() {
            if p == ancestor {
                return true;
            }
            if !std::mem::replace(&mut seen[p], true) {
                stack.extend_from_slice(&self.parents[p]);
            }
        }
        false
    }

    /// Reindexes the taxonomy under a permutation of unique ids. Used to
    /// check that graph encoders are equivariant to node relabelling.
    pub fn renamed(&self, rename: impl Fn(&str) -> String) -> Result<Self> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| ConceptNode {
                unique_id: rename(&n.unique_id),
                ..n.clone()
            })
            .collect();
        Self::from_nodes(nodes)
    }
}

/// Neighbour lists used by graph convolution, optionally with self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    lists: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    /// Accepts a square 0/1 matrix; rejects asymmetric or non-binary input.
    pub fn from_dense(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.rank() != 2 || a.cols() != n {
            return Err(Error::Config(format!(
                "adjacency must be square, got {:?}",
                a.shape()
            )));
        }
        let mut lists = vec![Vec::new(); n];
        for (v, list) in lists.iter_mut().enumerate() {
            for u in 0..n {
                let x = a.get(v, u);
                if x != a.get(u, v) || (x != 0.0 && x != 1.0) {
                    return Err(Error::Config(
                        "adjacency must be a symmetric 0/1 matrix".into(),
                    ));
                }
                if x == 1.0 {
                    list.push(u);
                }
            }
        }
        Ok(Self { lists })
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.lists[v]
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (v, list) in self.lists.iter().enumerate() {
            for &u in list {
                t.set(v, u, 1.0);
            }
        }
        t
    }
}

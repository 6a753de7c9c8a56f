//! Ground metrics for tree-Wasserstein: weighted operation taxonomies (and the
//! pair tree derived from them for 2-grams) and chain trees over depth atoms.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::arch::Vocabulary;
use crate::measure::{Depth, EmpiricalMeasure, NGram};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("taxonomy line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("operation `{0}` appears more than once in the taxonomy")]
    DuplicateLeaf(String),
    #[error("only 1-gram and 2-gram operation trees are supported (got n = {0})")]
    UnsupportedN(usize),
    #[error("node {0} is not in the tree")]
    UnknownNode(usize),
    #[error("atom `{0}` is not in the tree")]
    AtomNotInTree(String),
}

/// Nested grouping of operation labels with the weight of each node's edge to
/// its parent. Leaves are the operations.
#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomySpec {
    root: TaxonomyNode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyNode {
    pub name: String,
    pub weight: f64,
    pub children: Vec<TaxonomyNode>,
}

impl TaxonomyNode {
    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        if self.children.is_empty() {
            out.push(&self.name);
        }
        for c in &self.children {
            c.collect_leaves(out);
        }
    }
}

impl TaxonomySpec {
    /// Parses the indentation-nested `name weight` format. The first node line
    /// may omit its weight, in which case it is the root; otherwise an unnamed
    /// root is implied above the top-level lines.
    pub fn parse(text: &str) -> Result<Self, TreeError> {
        // (indent, name, weight) per meaningful line, with source line numbers
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let body = raw.split('#').next().unwrap_or("");
            if body.trim().is_empty() {
                continue;
            }
            if body.contains('\t') {
                return Err(TreeError::Parse { line: lineno, msg: "tabs are not allowed; indent with spaces".into() });
            }
            let indent = body.len() - body.trim_start().len();
            let mut parts = body.split_whitespace();
            let name = parts.next().expect("non-empty line").to_string();
            let weight = match parts.next() {
                Some(w) => Some(
                    w.parse::<f64>()
                        .map_err(|_| TreeError::Parse { line: lineno, msg: format!("bad weight `{w}`") })?,
                ),
                None => None,
            };
            if parts.next().is_some() {
                return Err(TreeError::Parse { line: lineno, msg: "expected `name weight`".into() });
            }
            if let Some(w) = weight {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(TreeError::Parse {
                        line: lineno,
                        msg: format!("edge weight must be positive, got {w}"),
                    });
                }
            }
            lines.push((lineno, indent, name, weight));
        }
        if lines.is_empty() {
            return Err(TreeError::Parse { line: 0, msg: "empty taxonomy".into() });
        }

        let (root_name, body) = match &lines[0] {
            (_, _, name, None) => (name.clone(), &lines[1..]),
            _ => ("root".to_string(), &lines[..]),
        };
        let root_indent = if body.len() < lines.len() { Some(lines[0].1) } else { None };

        // stack of (indent, node) under construction; index 0 is the root
        let mut stack: Vec<(Option<usize>, TaxonomyNode)> =
            vec![(root_indent, TaxonomyNode { name: root_name, weight: 0.0, children: Vec::new() })];
        for (lineno, indent, name, weight) in body {
            let Some(weight) = *weight else {
                return Err(TreeError::Parse { line: *lineno, msg: "missing edge weight".into() });
            };
            while stack.len() > 1 && stack.last().unwrap().0.is_some_and(|i| i >= *indent) {
                let (_, done) = stack.pop().unwrap();
                stack.last_mut().unwrap().1.children.push(done);
            }
            if let Some(ri) = stack[0].0 {
                if stack.len() == 1 && *indent <= ri {
                    return Err(TreeError::Parse { line: *lineno, msg: "node is not nested under the root".into() });
                }
            }
            stack.push((Some(*indent), TaxonomyNode { name: name.clone(), weight, children: Vec::new() }));
        }
        while stack.len() > 1 {
            let (_, done) = stack.pop().unwrap();
            stack.last_mut().unwrap().1.children.push(done);
        }
        let root = stack.pop().unwrap().1;
        if root.children.is_empty() {
            return Err(TreeError::Parse { line: 0, msg: "taxonomy has no operations".into() });
        }
        let spec = TaxonomySpec { root };
        let mut seen = std::collections::HashSet::new();
        for leaf in spec.leaves() {
            if !seen.insert(leaf) {
                return Err(TreeError::DuplicateLeaf(leaf.to_string()));
            }
        }
        Ok(spec)
    }

    pub fn default_nb() -> Self {
        Self::parse(crate::fixtures::DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn root(&self) -> &TaxonomyNode {
        &self.root
    }

    /// Operation labels in file order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for c in &self.root.children {
            c.collect_leaves(&mut out);
        }
        out
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.leaves())
    }
}

/// Rooted tree with positive edge weights. Node 0 is the root and every
/// parent index is smaller than its child's, so reverse index order is a
/// bottom-up traversal.
#[derive(Clone, Debug)]
pub struct MetricTree<A> {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    weight: Vec<f64>,
    level: Vec<usize>,
    atoms: BTreeMap<A, usize>,
}

impl<A: Ord + Clone + fmt::Display> MetricTree<A> {
    pub fn with_root(name: impl Into<String>) -> Self {
        MetricTree {
            names: vec![name.into()],
            parent: vec![None],
            weight: vec![0.0],
            level: vec![0],
            atoms: BTreeMap::new(),
        }
    }

    /// Appends a child of `parent`; returns its id.
    pub fn add_node(&mut self, parent: usize, weight: f64, name: impl Into<String>) -> usize {
        assert!(weight > 0.0, "tree edge weights must be positive");
        let id = self.names.len();
        self.names.push(name.into());
        self.parent.push(Some(parent));
        self.weight.push(weight);
        self.level.push(self.level[parent] + 1);
        id
    }

    /// Maps a measure atom onto `node`.
    pub fn bind(&mut self, atom: A, node: usize) {
        let prev = self.atoms.insert(atom, node);
        assert!(prev.is_none(), "atom bound twice");
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Weight of the edge from `node` to its parent (0 for the root).
    pub fn edge_weight(&self, node: usize) -> f64 {
        self.weight[node]
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn node_of(&self, atom: &A) -> Option<usize> {
        self.atoms.get(atom).copied()
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&A, usize)> + '_ {
        self.atoms.iter().map(|(a, &n)| (a, n))
    }

    /// Length of the unique path between two nodes.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<f64, TreeError> {
        for n in [a, b] {
            if n >= self.len() {
                return Err(TreeError::UnknownNode(n));
            }
        }
        let (mut a, mut b) = (a, b);
        let mut total = 0.0;
        while self.level[a] > self.level[b] {
            total += self.weight[a];
            a = self.parent[a].unwrap();
        }
        while self.level[b] > self.level[a] {
            total += self.weight[b];
            b = self.parent[b].unwrap();
        }
        while a != b {
            total += self.weight[a] + self.weight[b];
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
        }
        Ok(total)
    }

    pub fn atom_distance(&self, a: &A, b: &A) -> Result<f64, TreeError> {
        let na = self.node_of(a).ok_or_else(|| TreeError::AtomNotInTree(a.to_string()))?;
        let nb = self.node_of(b).ok_or_else(|| TreeError::AtomNotInTree(b.to_string()))?;
        self.tree_distance(na, nb)
    }

    /// For every node `v`, the total mass of `mu` in the subtree rooted at `v`
    /// (so entry `v` is the mass crossing the edge from `v` to its parent; the
    /// root entry is the total mass).
    pub fn subtree_masses(&self, mu: &EmpiricalMeasure<A>) -> Result<Vec<f64>, TreeError> {
        let mut mass = vec![0.0; self.len()];
        for (atom, w) in mu.iter() {
            let node = self.node_of(atom).ok_or_else(|| TreeError::AtomNotInTree(atom.to_string()))?;
            mass[node] += w;
        }
        for v in (1..self.len()).rev() {
            let p = self.parent[v].unwrap();
            mass[p] += mass[v];
        }
        Ok(mass)
    }
}

/// 1-gram tree: the taxonomy itself. 2-gram tree: ordered pairs of
/// operations, grouped by the ordered pair of their top-level taxonomy groups.
///
/// In the 2-gram tree every pair leaf `(a, b)` sits at depth
/// `max(depth(a), depth(b))`. A class of pairs drawn from one group hangs from
/// the root with that group's edge weight. A mixed class hangs at its
/// shallowest member depth minus a tenth of its largest in-group offset, so
/// its leaf edges are one level (a factor 0.1) finer. Single-member classes
/// attach their leaf directly to the root.
pub fn build_operation_tree(spec: &TaxonomySpec, n: usize) -> Result<MetricTree<NGram>, TreeError> {
    match n {
        1 => Ok(unigram_tree(spec)),
        2 => Ok(bigram_tree(spec)),
        other => Err(TreeError::UnsupportedN(other)),
    }
}

fn unigram_tree(spec: &TaxonomySpec) -> MetricTree<NGram> {
    fn walk(tree: &mut MetricTree<NGram>, node: &TaxonomyNode, parent: usize) {
        let id = tree.add_node(parent, node.weight, node.name.clone());
        if node.children.is_empty() {
            tree.bind(NGram::unigram(node.name.clone()), id);
        }
        for c in &node.children {
            walk(tree, c, id);
        }
    }
    let mut tree = MetricTree::with_root(spec.root.name.clone());
    for c in &spec.root.children {
        walk(&mut tree, c, 0);
    }
    tree
}

struct LeafInfo<'a> {
    name: &'a str,
    group: usize,
    depth: f64,
    offset: f64,
}

fn bigram_tree(spec: &TaxonomySpec) -> MetricTree<NGram> {
    fn walk<'a>(node: &'a TaxonomyNode, group: usize, top_weight: f64, depth: f64, out: &mut Vec<LeafInfo<'a>>) {
        let depth = depth + node.weight;
        if node.children.is_empty() {
            out.push(LeafInfo { name: &node.name, group, depth, offset: depth - top_weight });
        }
        for c in &node.children {
            walk(c, group, top_weight, depth, out);
        }
    }
    let groups = &spec.root.children;
    let mut leaves = Vec::new();
    for (g, node) in groups.iter().enumerate() {
        walk(node, g, node.weight, 0.0, &mut leaves);
    }

    let mut tree = MetricTree::with_root(format!("{}^2", spec.root.name));
    for (g, gnode) in groups.iter().enumerate() {
        for (h, hnode) in groups.iter().enumerate() {
            let members: Vec<(&LeafInfo, &LeafInfo)> = leaves
                .iter()
                .filter(|a| a.group == g)
                .flat_map(|a| leaves.iter().filter(|b| b.group == h).map(move |b| (a, b)))
                .collect();
            let pair_depth = |(a, b): &(&LeafInfo, &LeafInfo)| a.depth.max(b.depth);
            let gram = |(a, b): &(&LeafInfo, &LeafInfo)| NGram(vec![a.name.to_string(), b.name.to_string()]);
            if let [only] = members.as_slice() {
                let id = tree.add_node(0, pair_depth(only), gram(only).to_string());
                tree.bind(gram(only), id);
                continue;
            }
            let class_weight = if g == h {
                gnode.weight
            } else {
                let shallowest = members.iter().map(pair_depth).fold(f64::INFINITY, f64::min);
                let widest = members.iter().map(|(a, b)| a.offset.max(b.offset)).fold(0.0, f64::max);
                (shallowest - 0.1 * widest).max(0.5 * shallowest)
            };
            let class = tree.add_node(0, class_weight, format!("{}*{}", gnode.name, hnode.name));
            for m in &members {
                let id = tree.add_node(class, pair_depth(m) - class_weight, gram(m).to_string());
                tree.bind(gram(m), id);
            }
        }
    }
    tree
}

/// Path graph over increasing depth values rooted at the smallest one; each
/// edge carries the gap between its endpoints.
pub fn chain_tree(supports: &[Depth]) -> MetricTree<Depth> {
    assert!(!supports.is_empty(), "chain tree needs at least one support point");
    let mut tree = MetricTree::with_root(supports[0].to_string());
    tree.bind(supports[0], 0);
    for (i, pair) in supports.windows(2).enumerate() {
        assert!(pair[0] < pair[1], "chain supports must be strictly increasing");
        let gap = pair[1] - pair[0];
        let w = *gap.numer() as f64 / *gap.denom() as f64;
        let id = tree.add_node(i, w, pair[1].to_string());
        tree.bind(pair[1], id);
    }
    tree
}

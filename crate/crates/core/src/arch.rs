//! Cell architectures as labeled DAGs and the three distributional views of
//! them used by the distance layer: n-gram operation measures, and indegree /
//! outdegree measures placed at normalized longest-path depths.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measure::{Depth, EmpiricalMeasure, NGram};

pub const INPUT: &str = "input";
pub const OUTPUT: &str = "output";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error("adjacency matrix must be square with one row per operation ({ops} ops, {rows} rows)")]
    Shape { ops: usize, rows: usize },
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("expected exactly one `input` and one `output` node")]
    MissingInputOrOutput,
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("output is not reachable from input")]
    Disconnected,
    #[error("architecture has no interior {0}-gram path")]
    EmptyMeasure(usize),
}

/// The set of interior operation labels a search space may use.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary(Vec<String>);

impl Vocabulary {
    pub fn new<I, S>(ops: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ops: Vec<String> = ops.into_iter().map(Into::into).collect();
        let mut seen = std::collections::HashSet::new();
        ops.retain(|o| seen.insert(o.clone()));
        Vocabulary(ops)
    }

    pub fn ops(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, op: &str) -> bool {
        self.0.iter().any(|o| o == op)
    }
}

/// A cell: one operation label per node and a boolean adjacency matrix where
/// `adj[i][j]` means an edge `i -> j`.
///
/// After [`validate`] node 0 is the input, the last node is the output and the
/// matrix is strictly upper triangular.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureJson", into = "ArchitectureJson")]
pub struct Architecture {
    ops: Vec<String>,
    adj: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureJson {
    ops: Vec<String>,
    adj: Vec<Vec<u8>>,
}

impl TryFrom<ArchitectureJson> for Architecture {
    type Error = String;

    fn try_from(raw: ArchitectureJson) -> Result<Self, Self::Error> {
        let mut adj = Vec::with_capacity(raw.adj.len());
        for row in raw.adj {
            let mut bits = Vec::with_capacity(row.len());
            for v in row {
                match v {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    other => return Err(format!("adjacency entries must be 0 or 1, got {other}")),
                }
            }
            adj.push(bits);
        }
        Architecture::from_parts(raw.ops, adj).map_err(|e| e.to_string())
    }
}

impl From<Architecture> for ArchitectureJson {
    fn from(a: Architecture) -> Self {
        ArchitectureJson { adj: a.adj.iter().map(|row| row.iter().map(|&b| b as u8).collect()).collect(), ops: a.ops }
    }
}

impl fmt::Debug for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Architecture({})", canonical_key(self))
    }
}

impl Architecture {
    /// Pairs labels with an adjacency matrix. Only the shape is checked here.
    pub fn from_parts(ops: Vec<String>, adj: Vec<Vec<bool>>) -> Result<Self, ArchError> {
        let n = ops.len();
        if adj.len() != n || adj.iter().any(|row| row.len() != n) {
            return Err(ArchError::Shape { ops: n, rows: adj.len() });
        }
        Ok(Architecture { ops, adj })
    }

    /// Builds from labels and an edge list.
    pub fn from_edges<S: Into<String>>(
        ops: impl IntoIterator<Item = S>,
        edges: &[(usize, usize)],
    ) -> Result<Self, ArchError> {
        let ops: Vec<String> = ops.into_iter().map(Into::into).collect();
        let n = ops.len();
        let mut adj = vec![vec![false; n]; n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(ArchError::Shape { ops: n, rows: n });
            }
            adj[i][j] = true;
        }
        Ok(Architecture { ops, adj })
    }

    /// `input -> op_1 -> ... -> op_k -> output`.
    pub fn chain<S: AsRef<str>>(interior: &[S]) -> Self {
        let mut ops = vec![INPUT.to_string()];
        ops.extend(interior.iter().map(|s| s.as_ref().to_string()));
        ops.push(OUTPUT.to_string());
        let edges: Vec<_> = (0..ops.len() - 1).map(|i| (i, i + 1)).collect();
        Architecture::from_edges(ops, &edges).expect("chain edges are in range")
    }

    /// Decodes the `ops` / `adj_bits` pair used by tabular files. `bits` is either
    /// the row-major strict upper triangle or the full row-major matrix.
    pub fn from_bits(ops: Vec<String>, bits: &str) -> Result<Self, ArchError> {
        let n = ops.len();
        let tri = n * n.saturating_sub(1) / 2;
        let bits: Vec<bool> = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(ArchError::Shape { ops: n, rows: 0 }),
            })
            .collect::<Result<_, _>>()?;
        let mut adj = vec![vec![false; n]; n];
        if bits.len() == tri {
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    adj[i][j] = bits[k];
                    k += 1;
                }
            }
        } else if bits.len() == n * n {
            for i in 0..n {
                for j in 0..n {
                    adj[i][j] = bits[i * n + j];
                }
            }
        } else {
            return Err(ArchError::Shape { ops: n, rows: bits.len() });
        }
        Ok(Architecture { ops, adj })
    }

    pub fn ops(&self) -> &[String] {
        &self.ops
    }

    pub fn adj(&self) -> &[Vec<bool>] {
        &self.adj
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().flatten().filter(|&&b| b).count()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter_map(move |(j, &b)| b.then_some((i, j))))
    }

    /// Indices of the nodes that are neither input nor output (assumes validated order).
    pub fn interior(&self) -> std::ops::Range<usize> {
        1..self.num_nodes().saturating_sub(1)
    }

    pub fn indegree(&self, j: usize) -> usize {
        self.adj.iter().filter(|row| row[j]).count()
    }

    pub fn outdegree(&self, i: usize) -> usize {
        self.adj[i].iter().filter(|&&b| b).count()
    }

    /// Upper-triangle bits, row-major.
    pub fn adj_bits(&self) -> String {
        let n = self.num_nodes();
        let mut s = String::with_capacity(n * n / 2);
        for i in 0..n {
            for j in i + 1..n {
                s.push(if self.adj[i][j] { '1' } else { '0' });
            }
        }
        s
    }

    pub(crate) fn set_edge(&mut self, i: usize, j: usize, on: bool) {
        self.adj[i][j] = on;
    }

    pub(crate) fn set_op(&mut self, i: usize, op: String) {
        self.ops[i] = op;
    }

    /// Inserts a node at `pos`, shifting later nodes up by one. No edges are attached.
    pub(crate) fn insert_node(&mut self, pos: usize, op: String) {
        self.ops.insert(pos, op);
        for row in &mut self.adj {
            row.insert(pos, false);
        }
        let n = self.ops.len();
        self.adj.insert(pos, vec![false; n]);
    }

    pub(crate) fn remove_node(&mut self, pos: usize) {
        self.ops.remove(pos);
        self.adj.remove(pos);
        for row in &mut self.adj {
            row.remove(pos);
        }
    }

    /// Assuming topological (upper-triangular) order, connects every node to
    /// its predecessor / successor when it has no incoming / outgoing edge,
    /// which makes every node lie on an input-output path.
    pub(crate) fn repair(&mut self) {
        let n = self.num_nodes();
        for j in 1..n {
            if (0..j).all(|i| !self.adj[i][j]) {
                self.adj[j - 1][j] = true;
            }
        }
        for i in (0..n.saturating_sub(1)).rev() {
            if (i + 1..n).all(|j| !self.adj[i][j]) {
                self.adj[i][i + 1] = true;
            }
        }
    }
}

/// Normalizes an architecture: checks labels, rejects cycles, prunes nodes that
/// do not lie on an input-output path, and reorders nodes topologically with
/// ties broken by original index.
pub fn validate(arch: &Architecture, vocab: &Vocabulary) -> Result<Architecture, ArchError> {
    let n = arch.num_nodes();
    if arch.adj.len() != n || arch.adj.iter().any(|r| r.len() != n) {
        return Err(ArchError::Shape { ops: n, rows: arch.adj.len() });
    }
    let mut input = None;
    let mut output = None;
    for (i, op) in arch.ops.iter().enumerate() {
        match op.as_str() {
            INPUT if input.is_none() => input = Some(i),
            OUTPUT if output.is_none() => output = Some(i),
            INPUT | OUTPUT => return Err(ArchError::MissingInputOrOutput),
            other if !vocab.contains(other) => return Err(ArchError::UnknownOperation(other.to_string())),
            _ => {}
        }
    }
    let (Some(input), Some(output)) = (input, output) else {
        return Err(ArchError::MissingInputOrOutput);
    };

    let order = topological_order(&arch.adj).ok_or(ArchError::CyclicGraph)?;

    let mut forward = vec![false; n];
    forward[input] = true;
    for &v in &order {
        if forward[v] {
            for w in 0..n {
                if arch.adj[v][w] {
                    forward[w] = true;
                }
            }
        }
    }
    let mut backward = vec![false; n];
    backward[output] = true;
    for &v in order.iter().rev() {
        if (0..n).any(|w| arch.adj[v][w] && backward[w]) {
            backward[v] = true;
        }
    }
    if !forward[output] {
        return Err(ArchError::Disconnected);
    }
    let alive: Vec<bool> = (0..n).map(|v| forward[v] && backward[v]).collect();

    // Kahn's algorithm restricted to alive nodes; the min-heap breaks ties by index.
    let mut indeg = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if arch.adj[i][j] && alive[i] && alive[j] {
                indeg[j] += 1;
            }
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| alive[v] && indeg[v] == 0).map(Reverse).collect();
    let mut kept = Vec::new();
    while let Some(Reverse(v)) = heap.pop() {
        kept.push(v);
        for w in 0..n {
            if arch.adj[v][w] && alive[w] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    heap.push(Reverse(w));
                }
            }
        }
    }
    debug_assert_eq!(kept.first(), Some(&input));
    debug_assert_eq!(kept.last(), Some(&output));

    let ops = kept.iter().map(|&v| arch.ops[v].clone()).collect();
    let adj = kept.iter().map(|&i| kept.iter().map(|&j| arch.adj[i][j]).collect()).collect();
    Ok(Architecture { ops, adj })
}

/// All nodes in topological order, or `None` if the graph has a cycle.
fn topological_order(adj: &[Vec<bool>]) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut indeg = vec![0usize; n];
    for row in adj {
        for (j, &b) in row.iter().enumerate() {
            if b {
                indeg[j] += 1;
            }
        }
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for w in 0..n {
            if adj[v][w] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    heap.push(Reverse(w));
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

/// Normalized frequencies of label sequences read along directed paths of
/// exactly `n` consecutive interior nodes. Input and output never contribute.
pub fn ngram_measure(arch: &Architecture, n: usize) -> Result<EmpiricalMeasure<NGram>, ArchError> {
    assert!(n >= 1, "n-gram order must be positive");
    let interior = arch.interior();
    let mut counts: BTreeMap<NGram, f64> = BTreeMap::new();
    let mut path = Vec::with_capacity(n);
    for start in interior.clone() {
        path.clear();
        path.push(start);
        extend_paths(arch, &interior, n, &mut path, &mut counts);
    }
    EmpiricalMeasure::from_masses(counts).ok_or(ArchError::EmptyMeasure(n))
}

fn extend_paths(
    arch: &Architecture,
    interior: &std::ops::Range<usize>,
    n: usize,
    path: &mut Vec<usize>,
    counts: &mut BTreeMap<NGram, f64>,
) {
    if path.len() == n {
        let gram = NGram(path.iter().map(|&v| arch.ops[v].clone()).collect());
        *counts.entry(gram).or_insert(0.0) += 1.0;
        return;
    }
    let last = *path.last().expect("path is never empty");
    for next in interior.clone() {
        if arch.adj[last][next] {
            path.push(next);
            extend_paths(arch, interior, n, path, counts);
            path.pop();
        }
    }
}

/// Longest-path depth of each node from the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthProfile {
    pub eta: Vec<usize>,
    pub m: usize,
}

impl DepthProfile {
    pub fn normalized(&self, node: usize) -> Depth {
        Depth::new(self.eta[node] as u64 + 1, self.m as u64 + 1)
    }
}

pub fn depth_profile(arch: &Architecture) -> DepthProfile {
    let n = arch.num_nodes();
    let mut eta = vec![0usize; n];
    for j in 0..n {
        for i in 0..j {
            if arch.adj[i][j] {
                eta[j] = eta[j].max(eta[i] + 1);
            }
        }
    }
    let m = eta[n - 1];
    DepthProfile { eta, m }
}

/// Indegree and outdegree measures: node `l` contributes `deg(l) / E` at atom
/// `(eta_l + 1) / (m + 1)`.
pub fn degree_measures(arch: &Architecture) -> (EmpiricalMeasure<Depth>, EmpiricalMeasure<Depth>) {
    let profile = depth_profile(arch);
    let edges = arch.num_edges() as f64;
    let n = arch.num_nodes();
    let indeg = EmpiricalMeasure::from_masses((0..n).map(|l| (profile.normalized(l), arch.indegree(l) as f64 / edges)))
        .expect("validated architectures have at least one edge");
    let outdeg =
        EmpiricalMeasure::from_masses((0..n).map(|l| (profile.normalized(l), arch.outdegree(l) as f64 / edges)))
            .expect("validated architectures have at least one edge");
    (indeg, outdeg)
}

/// Labels in node order joined by `;`, then `|`, then the upper-triangle bits.
/// No isomorphism canonicalization is attempted.
pub fn canonical_key(arch: &Architecture) -> String {
    format!("{}|{}", arch.ops.join(";"), arch.adj_bits())
}

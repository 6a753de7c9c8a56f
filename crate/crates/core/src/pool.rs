//! Candidate pool generation: random architectures, single-step mutations and
//! the acquisition-guided evolutionary loop that builds each iteration's pool.

use std::collections::{HashMap, HashSet};

use log::debug;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::arch::{canonical_key, validate, Architecture, Vocabulary, INPUT, OUTPUT};
use crate::gp::GpModel;
use crate::select::{acquisition_scores, AcquisitionKind, SelectError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("need 2 <= min_nodes <= max_nodes (got {min} and {max})")]
    NodeBounds { min: usize, max: usize },
    #[error("max_edges {edges} cannot connect {nodes} nodes")]
    EdgeBound { edges: usize, nodes: usize },
    #[error("empty operation vocabulary")]
    EmptyVocabulary,
}

/// Bounds of a cell search space. Node counts include input and output.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceSpec {
    vocab: Vocabulary,
    max_nodes: usize,
    max_edges: usize,
    min_nodes: usize,
}

impl SpaceSpec {
    pub fn new(vocab: Vocabulary, min_nodes: usize, max_nodes: usize, max_edges: usize) -> Result<Self, SpaceError> {
        if min_nodes < 2 || min_nodes > max_nodes {
            return Err(SpaceError::NodeBounds { min: min_nodes, max: max_nodes });
        }
        if max_edges + 1 < max_nodes {
            return Err(SpaceError::EdgeBound { edges: max_edges, nodes: max_nodes });
        }
        if vocab.is_empty() {
            return Err(SpaceError::EmptyVocabulary);
        }
        Ok(SpaceSpec { vocab, max_nodes, max_edges, min_nodes })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn min_nodes(&self) -> usize {
        self.min_nodes
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn max_edges(&self) -> usize {
        self.max_edges
    }

    /// Whether a validated architecture respects the bounds and vocabulary.
    pub fn contains(&self, arch: &Architecture) -> bool {
        let n = arch.num_nodes();
        (self.min_nodes..=self.max_nodes).contains(&n)
            && arch.num_edges() <= self.max_edges
            && arch.interior().all(|i| self.vocab.contains(&arch.ops()[i]))
    }

    fn random_op<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        self.vocab.ops().choose(rng).expect("vocabulary is nonempty").clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mutation {
    ChangeOp,
    AddNode,
    RemoveNode,
    AddEdge,
    RemoveEdge,
}

impl Mutation {
    pub const ALL: [Mutation; 5] =
        [Mutation::ChangeOp, Mutation::AddNode, Mutation::RemoveNode, Mutation::AddEdge, Mutation::RemoveEdge];
}

// Repaired, validated and in bounds, or nothing.
fn finish(mut arch: Architecture, space: &SpaceSpec) -> Option<Architecture> {
    arch.repair();
    let arch = validate(&arch, &space.vocab).ok()?;
    space.contains(&arch).then_some(arch)
}

/// Uniform node count, random upper-triangular edges at a random density,
/// uniform labels; repaired so every node lies on an input-output path.
pub fn random_architecture<R: Rng + ?Sized>(space: &SpaceSpec, rng: &mut R) -> Architecture {
    let n = rng.random_range(space.min_nodes..=space.max_nodes);
    let mut interior: Vec<String> = (0..n - 2).map(|_| space.random_op(rng)).collect();
    for _ in 0..50 {
        let density: f64 = rng.random();
        let mut ops = Vec::with_capacity(n);
        ops.push(INPUT.to_string());
        ops.extend(interior.iter().cloned());
        ops.push(OUTPUT.to_string());
        let adj = (0..n).map(|i| (0..n).map(|j| j > i && rng.random::<f64>() < density).collect()).collect();
        let arch = Architecture::from_parts(ops, adj).expect("shape is consistent");
        if let Some(a) = finish(arch, space) {
            return a;
        }
        interior = (0..n - 2).map(|_| space.random_op(rng)).collect();
    }
    Architecture::chain(&interior)
}

fn apply<R: Rng + ?Sized>(arch: &Architecture, space: &SpaceSpec, kind: Mutation, rng: &mut R) -> Option<Architecture> {
    let n = arch.num_nodes();
    let mut out = arch.clone();
    match kind {
        Mutation::ChangeOp => {
            if n < 3 || space.vocab.len() < 2 {
                return None;
            }
            let node = rng.random_range(1..n - 1);
            let others: Vec<&String> = space.vocab.ops().iter().filter(|o| **o != arch.ops()[node]).collect();
            out.set_op(node, (*others.choose(rng)?).clone());
        }
        Mutation::AddNode => {
            if n >= space.max_nodes || arch.num_edges() + 2 > space.max_edges {
                return None;
            }
            let pos = rng.random_range(1..n);
            out.insert_node(pos, space.random_op(rng));
            let from = rng.random_range(0..pos);
            let to = rng.random_range(pos + 1..n + 1);
            out.set_edge(from, pos, true);
            out.set_edge(pos, to, true);
        }
        Mutation::RemoveNode => {
            if n <= space.min_nodes || n < 3 {
                return None;
            }
            out.remove_node(rng.random_range(1..n - 1));
        }
        Mutation::AddEdge => {
            let free: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| !arch.has_edge(i, j)).collect();
            let &(i, j) = free.choose(rng)?;
            out.set_edge(i, j, true);
        }
        Mutation::RemoveEdge => {
            let edges: Vec<(usize, usize)> = arch.edges().collect();
            let &(i, j) = edges.choose(rng)?;
            out.set_edge(i, j, false);
        }
    }
    finish(out, space)
}

/// One mutation from a uniformly shuffled order of kinds; kinds that are
/// inapplicable, leave the key unchanged or leave the space fall through to
/// the next. Returns the input when nothing applies.
pub fn mutate<R: Rng + ?Sized>(arch: &Architecture, space: &SpaceSpec, rng: &mut R) -> Architecture {
    let key = canonical_key(arch);
    let mut kinds = Mutation::ALL;
    kinds.shuffle(rng);
    for kind in kinds {
        for _ in 0..4 {
            if let Some(m) = apply(arch, space, kind, rng) {
                if canonical_key(&m) != key {
                    return m;
                }
            }
        }
    }
    arch.clone()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolConfig {
    pub size: usize,
    pub mutate_rounds: usize,
    pub seed_fraction: f64,
    pub kind: AcquisitionKind,
    pub kappa: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { size: 100, mutate_rounds: 5, seed_fraction: 0.25, kind: AcquisitionKind::Ucb, kappa: 2.0 }
    }
}

/// Weighted sampling without replacement with weights `exp(score)`.
fn softmax_sample<R: Rng + ?Sized>(scores: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(scores.len()) {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let i = pick.expect("some weight is positive");
        out.push(i);
        weights[i] = 0.0;
    }
    out
}

/// Builds a pool of up to `cfg.size` distinct, unevaluated, admissible
/// architectures.
///
/// Seeds are drawn from the evaluated set by softmax over acquisition; each
/// round mutates every member once and keeps the best `size` by acquisition.
/// Evaluated keys are then dropped and the pool is padded with random
/// architectures.
pub fn generate_pool<R, F>(
    model: &GpModel,
    evaluated: &[Architecture],
    space: &SpaceSpec,
    cfg: &PoolConfig,
    admissible: F,
    rng: &mut R,
) -> Result<Vec<Architecture>, SelectError>
where
    R: Rng + ?Sized,
    F: Fn(&Architecture) -> bool,
{
    let done: HashSet<String> = evaluated.iter().map(canonical_key).collect();
    let mut members: Vec<(Architecture, f64)> = Vec::new();

    if !evaluated.is_empty() && cfg.size > 0 {
        let scores = acquisition_scores(model, evaluated, cfg.kind, cfg.kappa)?;
        let n_seeds = ((cfg.size as f64) * cfg.seed_fraction).ceil().max(1.0) as usize;
        members =
            softmax_sample(&scores, n_seeds, rng).into_iter().map(|i| (evaluated[i].clone(), scores[i])).collect();
        let mut seen: HashSet<String> = members.iter().map(|(a, _)| canonical_key(a)).collect();
        let mut score_cache: HashMap<String, f64> = HashMap::new();

        for _ in 0..cfg.mutate_rounds {
            let mut fresh = Vec::new();
            for (a, _) in &members {
                let m = mutate(a, space, rng);
                let key = canonical_key(&m);
                if done.contains(&key) || !admissible(&m) || !seen.insert(key) {
                    continue;
                }
                fresh.push(m);
            }
            let todo: Vec<Architecture> =
                fresh.iter().filter(|a| !score_cache.contains_key(&canonical_key(a))).cloned().collect();
            if !todo.is_empty() {
                let s = acquisition_scores(model, &todo, cfg.kind, cfg.kappa)?;
                for (a, v) in todo.iter().zip(s) {
                    score_cache.insert(canonical_key(a), v);
                }
            }
            members.extend(fresh.into_iter().map(|a| {
                let v = score_cache[&canonical_key(&a)];
                (a, v)
            }));
            // stable: equal scores keep their earlier position
            members.sort_by(|x, y| y.1.total_cmp(&x.1));
            for (a, _) in members.drain(cfg.size.min(members.len())..) {
                seen.remove(&canonical_key(&a));
            }
        }
    }

    let mut pool: Vec<Architecture> = Vec::with_capacity(cfg.size);
    let mut keys: HashSet<String> = HashSet::new();
    for (a, _) in members {
        let key = canonical_key(&a);
        if !done.contains(&key) && keys.insert(key) {
            pool.push(a);
        }
    }
    let short = cfg.size.saturating_sub(pool.len());
    let mut attempts = 0;
    while pool.len() < cfg.size && attempts < 50 * cfg.size {
        attempts += 1;
        let a = random_architecture(space, rng);
        let key = canonical_key(&a);
        if !done.contains(&key) && admissible(&a) && keys.insert(key) {
            pool.push(a);
        }
    }
    if short > 0 {
        debug!("pool padded with {} random architectures ({} total)", short.min(pool.len()), pool.len());
    }
    Ok(pool)
}

//! Tree-Wasserstein distances between architectures, the combined
//! discrepancy `d_NN`, and the exponentiated kernel built on it.
//!
//! Per-pair component distances depend only on the two architectures and the
//! n-gram order, so [`ArchMetric`] caches them once and every kernel
//! evaluation (for any hyperparameters) re-exponentiates cached values.

use std::fmt;
use std::sync::{Arc, RwLock};

use dashmap::DashMap;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{canonical_key, degree_measures, ngram_measure, ArchError, Architecture, Vocabulary};
use crate::measure::{Depth, EmpiricalMeasure, NGram};
use crate::trees::{build_operation_tree, chain_tree, MetricTree, TaxonomySpec, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistanceError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid distance weights ({0}, {1}): need a1, a2 >= 0 and a1 + a2 <= 1")]
    Weights(f64, f64),
}

/// Closed-form tree-Wasserstein: sum over edges of the edge weight times the
/// absolute difference of subtree masses.
pub fn tw_distance<A>(
    tree: &MetricTree<A>,
    mu: &EmpiricalMeasure<A>,
    nu: &EmpiricalMeasure<A>,
) -> Result<f64, TreeError>
where
    A: Ord + Clone + fmt::Display,
{
    let a = tree.subtree_masses(mu)?;
    let b = tree.subtree_masses(nu)?;
    Ok(tw_from_masses(tree, &a, &b))
}

fn tw_from_masses<A: Ord + Clone + fmt::Display>(tree: &MetricTree<A>, a: &[f64], b: &[f64]) -> f64 {
    (1..tree.len()).map(|v| tree.edge_weight(v) * (a[v] - b[v]).abs()).sum()
}

/// Convex weights of the three components; the outdegree weight is implied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl DistanceWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self, DistanceError> {
        let ok = alpha1 >= 0.0 && alpha2 >= 0.0 && alpha1 + alpha2 <= 1.0 + 1e-12;
        if !ok {
            return Err(DistanceError::Weights(alpha1, alpha2));
        }
        Ok(DistanceWeights { alpha1, alpha2 })
    }

    pub fn uniform() -> Self {
        DistanceWeights { alpha1: 1.0 / 3.0, alpha2: 1.0 / 3.0 }
    }

    pub fn alpha3(&self) -> f64 {
        (1.0 - self.alpha1 - self.alpha2).max(0.0)
    }
}

/// Kernel inverse length scales for the operation, indegree and outdegree
/// components, plus the observation-noise variance used by the GP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda: [f64; 3],
    pub noise_var: f64,
}

impl KernelParams {
    pub fn new(l1: f64, l2: f64, l3: f64, noise_var: f64) -> Self {
        assert!(l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0 && noise_var >= 0.0, "kernel parameters must be nonnegative");
        KernelParams { lambda: [l1, l2, l3], noise_var }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda[0], self.lambda[1], self.lambda[2], self.noise_var]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        KernelParams::new(v[0], v[1], v[2], v[3])
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams::new(1.0, 1.0, 1.0, 1e-2)
    }
}

/// The three tree-Wasserstein distances between a pair of architectures.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TwComponents {
    pub ops: f64,
    pub indegree: f64,
    pub outdegree: f64,
}

impl TwComponents {
    pub fn as_array(&self) -> [f64; 3] {
        [self.ops, self.indegree, self.outdegree]
    }

    pub fn d_nn(&self, w: &DistanceWeights) -> f64 {
        w.alpha1 * self.ops + w.alpha2 * self.indegree + w.alpha3() * self.outdegree
    }

    pub fn kernel(&self, p: &KernelParams) -> f64 {
        (-(p.lambda[0] * self.ops + p.lambda[1] * self.indegree + p.lambda[2] * self.outdegree)).exp()
    }
}

/// Measures extracted from one architecture. An architecture without any
/// interior n-path has no operation atoms; its operation measure is then the
/// point mass at the tree root.
#[derive(Clone, Debug)]
pub struct ArchFeatures {
    ops: Option<EmpiricalMeasure<NGram>>,
    op_masses: Vec<f64>,
    indegree: EmpiricalMeasure<Depth>,
    outdegree: EmpiricalMeasure<Depth>,
}

impl ArchFeatures {
    pub fn op_measure(&self) -> Option<&EmpiricalMeasure<NGram>> {
        self.ops.as_ref()
    }

    pub fn indegree(&self) -> &EmpiricalMeasure<Depth> {
        &self.indegree
    }

    pub fn outdegree(&self) -> &EmpiricalMeasure<Depth> {
        &self.outdegree
    }
}

/// Distance context for one taxonomy and n-gram order, with a concurrent
/// cache of per-architecture features and per-pair component distances.
pub struct ArchMetric {
    taxonomy: TaxonomySpec,
    vocab: Vocabulary,
    ngram: usize,
    tree: MetricTree<NGram>,
    ids: DashMap<String, u32>,
    features: RwLock<Vec<Arc<ArchFeatures>>>,
    pairs: DashMap<(u32, u32), TwComponents>,
}

impl fmt::Debug for ArchMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArchMetric")
            .field("ngram", &self.ngram)
            .field("cached_archs", &self.ids.len())
            .field("cached_pairs", &self.pairs.len())
            .finish()
    }
}

impl ArchMetric {
    pub fn new(taxonomy: TaxonomySpec, ngram: usize) -> Result<Self, DistanceError> {
        let tree = build_operation_tree(&taxonomy, ngram)?;
        Ok(ArchMetric {
            vocab: taxonomy.vocabulary(),
            taxonomy,
            ngram,
            tree,
            ids: DashMap::new(),
            features: RwLock::new(Vec::new()),
            pairs: DashMap::new(),
        })
    }

    pub fn ngram(&self) -> usize {
        self.ngram
    }

    pub fn taxonomy(&self) -> &TaxonomySpec {
        &self.taxonomy
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn operation_tree(&self) -> &MetricTree<NGram> {
        &self.tree
    }

    /// Extracts measures without touching the cache.
    pub fn extract(&self, arch: &Architecture) -> Result<ArchFeatures, DistanceError> {
        let ops = match ngram_measure(arch, self.ngram) {
            Ok(m) => Some(m),
            Err(ArchError::EmptyMeasure(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let op_masses = match &ops {
            Some(m) => self.tree.subtree_masses(m)?,
            None => {
                let mut root = vec![0.0; self.tree.len()];
                root[0] = 1.0;
                root
            }
        };
        let (indegree, outdegree) = degree_measures(arch);
        Ok(ArchFeatures { ops, op_masses, indegree, outdegree })
    }

    fn intern(&self, arch: &Architecture) -> Result<u32, DistanceError> {
        let key = canonical_key(arch);
        if let Some(id) = self.ids.get(&key) {
            return Ok(*id);
        }
        let feats = Arc::new(self.extract(arch)?);
        let entry = self.ids.entry(key).or_insert_with(|| {
            let mut table = self.features.write().expect("feature table poisoned");
            table.push(feats);
            (table.len() - 1) as u32
        });
        Ok(*entry)
    }

    fn feature(&self, id: u32) -> Arc<ArchFeatures> {
        self.features.read().expect("feature table poisoned")[id as usize].clone()
    }

    pub fn features(&self, arch: &Architecture) -> Result<Arc<ArchFeatures>, DistanceError> {
        Ok(self.feature(self.intern(arch)?))
    }

    /// Component distances between two feature sets (uncached).
    pub fn components_of(&self, a: &ArchFeatures, b: &ArchFeatures) -> TwComponents {
        TwComponents {
            ops: tw_from_masses(&self.tree, &a.op_masses, &b.op_masses),
            indegree: chain_tw(&a.indegree, &b.indegree),
            outdegree: chain_tw(&a.outdegree, &b.outdegree),
        }
    }

    /// Component distances for a pair, memoized by canonical key.
    pub fn components(&self, x: &Architecture, z: &Architecture) -> Result<TwComponents, DistanceError> {
        let (i, j) = (self.intern(x)?, self.intern(z)?);
        if i == j {
            return Ok(TwComponents::default());
        }
        let key = (i.min(j), i.max(j));
        if let Some(c) = self.pairs.get(&key) {
            return Ok(*c);
        }
        let c = self.components_of(&self.feature(key.0), &self.feature(key.1));
        self.pairs.insert(key, c);
        Ok(c)
    }

    /// Component distance matrices over a set, computed once and reusable for
    /// any kernel parameters.
    pub fn component_matrices(&self, xs: &[Architecture]) -> Result<ComponentMatrices, DistanceError> {
        self.cross_matrices(xs, xs)
    }

    pub fn cross_matrices(&self, xs: &[Architecture], zs: &[Architecture]) -> Result<ComponentMatrices, DistanceError> {
        let rows: Vec<Vec<TwComponents>> = xs
            .par_iter()
            .map(|x| zs.iter().map(|z| self.components(x, z)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?;
        let (r, c) = (xs.len(), zs.len());
        let build = |f: fn(&TwComponents) -> f64| DMatrix::from_fn(r, c, |i, j| f(&rows[i][j]));
        Ok(ComponentMatrices { parts: [build(|t| t.ops), build(|t| t.indegree), build(|t| t.outdegree)] })
    }

    pub fn cached_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Per-pair TW on the chain over the union of both supports.
fn chain_tw(a: &EmpiricalMeasure<Depth>, b: &EmpiricalMeasure<Depth>) -> f64 {
    let mut support: Vec<Depth> = a.support().iter().chain(b.support()).copied().collect();
    support.sort();
    support.dedup();
    let tree = chain_tree(&support);
    tw_distance(&tree, a, b).expect("chain covers both supports")
}

/// Operation, indegree and outdegree distance matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMatrices {
    pub parts: [DMatrix<f64>; 3],
}

impl ComponentMatrices {
    pub fn nrows(&self) -> usize {
        self.parts[0].nrows()
    }

    pub fn ncols(&self) -> usize {
        self.parts[0].ncols()
    }

    /// `exp(-sum_i lambda_i D_i)` entrywise.
    pub fn kernel(&self, p: &KernelParams) -> DMatrix<f64> {
        let [o, i, u] = &self.parts;
        DMatrix::from_fn(self.nrows(), self.ncols(), |r, c| {
            (-(p.lambda[0] * o[(r, c)] + p.lambda[1] * i[(r, c)] + p.lambda[2] * u[(r, c)])).exp()
        })
    }

    pub fn d_nn(&self, w: &DistanceWeights) -> DMatrix<f64> {
        let [o, i, u] = &self.parts;
        o * w.alpha1 + i * w.alpha2 + u * w.alpha3()
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> ComponentMatrices {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])]);
        ComponentMatrices { parts: [pick(&self.parts[0]), pick(&self.parts[1]), pick(&self.parts[2])] }
    }
}

pub fn d_nn(
    metric: &ArchMetric,
    x: &Architecture,
    z: &Architecture,
    w: &DistanceWeights,
) -> Result<f64, DistanceError> {
    Ok(metric.components(x, z)?.d_nn(w))
}

pub fn kernel(metric: &ArchMetric, x: &Architecture, z: &Architecture, p: &KernelParams) -> Result<f64, DistanceError> {
    Ok(metric.components(x, z)?.kernel(p))
}

pub fn kernel_matrix(
    metric: &ArchMetric,
    xs: &[Architecture],
    p: &KernelParams,
) -> Result<DMatrix<f64>, DistanceError> {
    Ok(metric.component_matrices(xs)?.kernel(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{golden_x, golden_z};
    use crate::ot::ot_oracle;

    fn metric(n: usize) -> ArchMetric {
        ArchMetric::new(TaxonomySpec::default_nb(), n).unwrap()
    }

    /// Independent route: exact OT on the pairwise tree-distance cost matrix.
    fn oracle<A: Ord + Clone + fmt::Display>(
        tree: &MetricTree<A>,
        mu: &EmpiricalMeasure<A>,
        nu: &EmpiricalMeasure<A>,
    ) -> f64 {
        let cost: Vec<Vec<f64>> = mu
            .support()
            .iter()
            .map(|a| nu.support().iter().map(|b| tree.atom_distance(a, b).unwrap()).collect())
            .collect();
        ot_oracle(&cost, mu.weights(), nu.weights()).unwrap()
    }

    #[test]
    fn golden_unigram() {
        let m = metric(1);
        let c = m.components(&golden_x(), &golden_z()).unwrap();
        let fx = m.extract(&golden_x()).unwrap();
        let fz = m.extract(&golden_z()).unwrap();
        let exact = oracle(m.operation_tree(), fx.op_measure().unwrap(), fz.op_measure().unwrap());
        // Half of x's cv3 mass must reach mp3 at cost 2: the OT value is 1.
        assert!((exact - 1.0).abs() < 1e-12);
        assert!((c.ops - exact).abs() < 1e-12);
    }

    #[test]
    fn golden_bigram() {
        let m = metric(2);
        let c = m.components(&golden_x(), &golden_z()).unwrap();
        assert!((c.ops - 2.0).abs() < 1e-12);
    }

    #[test]
    fn golden_degrees() {
        let c = metric(1).components(&golden_x(), &golden_z()).unwrap();
        assert!((c.indegree - 4.0 / 70.0).abs() < 1e-12);
        assert!((c.outdegree - 6.0 / 70.0).abs() < 1e-12);
    }

    #[test]
    fn d_nn_examples() {
        let m1 = metric(1);
        let (x, z) = (golden_x(), golden_z());
        assert_eq!(d_nn(&m1, &x, &x, &DistanceWeights::uniform()).unwrap(), 0.0);
        let d = d_nn(&m1, &x, &z, &DistanceWeights::uniform()).unwrap();
        assert!((d - (1.0 + 4.0 / 70.0 + 6.0 / 70.0) / 3.0).abs() < 1e-12);
        let d2 = d_nn(&metric(2), &x, &z, &DistanceWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert!((d2 - 2.0).abs() < 1e-12);
        assert!(DistanceWeights::new(0.7, 0.5).is_err());
        assert!(DistanceWeights::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn kernel_examples() {
        let m = metric(1);
        let (x, z) = (golden_x(), golden_z());
        assert_eq!(kernel(&m, &x, &x, &KernelParams::default()).unwrap(), 1.0);
        let k = kernel(&m, &x, &z, &KernelParams::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(kernel(&m, &x, &z, &KernelParams::new(0.0, 0.0, 0.0, 0.0)).unwrap(), 1.0);
    }

    #[test]
    fn kernel_matrix_small_cases() {
        let m = metric(1);
        let x = golden_x();
        let k = kernel_matrix(&m, std::slice::from_ref(&x), &KernelParams::default()).unwrap();
        assert_eq!(k, DMatrix::from_element(1, 1, 1.0));
        let k = kernel_matrix(&m, &[x.clone(), x], &KernelParams::default()).unwrap();
        assert_eq!(k, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn empty_op_measure_sits_at_root() {
        let m = metric(2);
        let bare = Architecture::chain(&["cv3"]);
        let x = golden_x();
        // x's 2-grams all sit at depth 1 in the pair tree
        let c = m.components(&bare, &x).unwrap();
        assert!((c.ops - 1.0).abs() < 1e-12);
        let other = Architecture::chain(&["mp3"]);
        assert_eq!(m.components(&bare, &other).unwrap().ops, 0.0);
    }

    #[test]
    fn cache_is_reused() {
        let m = metric(1);
        let (x, z) = (golden_x(), golden_z());
        let a = m.components(&x, &z).unwrap();
        let b = m.components(&z, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.cached_pairs(), 1);
    }
}

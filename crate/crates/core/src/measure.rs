use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// A sequence of operation labels read along a directed path.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NGram(pub Vec<String>);

impl NGram {
    pub fn unigram(op: impl Into<String>) -> Self {
        NGram(vec![op.into()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for NGram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("-"))
    }
}

/// Normalized depth `(eta + 1) / (m + 1)` kept as an exact fraction so that
/// equal depths coming from different node counts merge exactly.
pub type Depth = Ratio<u64>;

/// A finite probability measure: distinct atoms with nonnegative weights
/// summing to one. Atoms are stored in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure<A> {
    support: Vec<A>,
    weights: Vec<f64>,
}

impl<A: Ord + Clone> EmpiricalMeasure<A> {
    /// Builds a measure from unnormalized masses. Repeated atoms are merged and
    /// zero-mass atoms dropped. Returns `None` when the total mass is not positive.
    pub fn from_masses<I>(masses: I) -> Option<Self>
    where
        I: IntoIterator<Item = (A, f64)>,
    {
        let mut merged: BTreeMap<A, f64> = BTreeMap::new();
        for (atom, mass) in masses {
            assert!(mass >= 0.0 && mass.is_finite(), "negative or non-finite mass");
            *merged.entry(atom).or_insert(0.0) += mass;
        }
        merged.retain(|_, m| *m > 0.0);
        let total: f64 = merged.values().sum();
        if total <= 0.0 {
            return None;
        }
        let (support, weights) = merged.into_iter().map(|(a, m)| (a, m / total)).unzip();
        Some(EmpiricalMeasure { support, weights })
    }

    pub fn dirac(atom: A) -> Self {
        EmpiricalMeasure { support: vec![atom], weights: vec![1.0] }
    }

    pub fn support(&self) -> &[A] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&A, f64)> + '_ {
        self.support.iter().zip(self.weights.iter().copied())
    }

    /// Weight of `atom`, zero when it is not in the support.
    pub fn mass_of(&self, atom: &A) -> f64 {
        self.support.binary_search(atom).map(|i| self.weights[i]).unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_and_normalizes() {
        let m = EmpiricalMeasure::from_masses([("b", 1.0), ("a", 2.0), ("b", 1.0), ("c", 0.0)]).unwrap();
        assert_eq!(m.support(), &["a", "b"]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_total_is_none() {
        assert!(EmpiricalMeasure::<u8>::from_masses([(1, 0.0)]).is_none());
        assert!(EmpiricalMeasure::<u8>::from_masses([]).is_none());
    }

    #[test]
    fn depth_atoms_merge_exactly() {
        let m = EmpiricalMeasure::from_masses([(Depth::new(2, 4), 1.0), (Depth::new(1, 2), 1.0)]).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.mass_of(&Depth::new(1, 2)), 1.0);
    }
}

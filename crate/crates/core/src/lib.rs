//! Neural architecture search over discrete cell spaces with tree-Wasserstein
//! kernels, Gaussian-process surrogates and quality k-DPP batch selection.

pub mod arch;
pub mod bench;
pub mod fixtures;
pub mod gp;
pub mod measure;
pub mod ot;
pub mod pool;
pub mod runner;
pub mod select;
pub mod trees;
pub mod tw;

pub use arch::{canonical_key, validate, ArchError, Architecture, Vocabulary};
pub use bench::{BenchmarkOracle, Evaluation};
pub use gp::{GpModel, HyperBounds, HyperOptConfig};
pub use measure::{Depth, EmpiricalMeasure, NGram};
pub use pool::{Mutation, SpaceSpec};
pub use runner::{ExperimentConfig, Mode, Optimizer, RunRecord};
pub use select::{BatchStrategy, QualityKernel, QualitySign};
pub use trees::{MetricTree, TaxonomySpec};
pub use tw::{ArchMetric, DistanceWeights, KernelParams, TwComponents};

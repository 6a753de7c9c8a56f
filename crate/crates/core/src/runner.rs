//! Experiment loop: random initial design, then repeated hyperparameter
//! learning, GP fit, pool generation and selection of one (sequential) or
//! `B` (batch) architectures per iteration. Also the random-search and
//! elitist-evolution baselines, result CSVs and per-iteration summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{canonical_key, Architecture, Vocabulary};
use crate::bench::{load_tabular, synth_space, BenchError, BenchmarkOracle};
use crate::gp::{optimize_on_distances, standardize, GpError, GpModel, HyperBounds, HyperOptConfig};
use crate::pool::{generate_pool, mutate, PoolConfig, SpaceError, SpaceSpec};
use crate::select::{
    acquisition_scores, argmax_acquisition, batch_select, AcquisitionKind, BatchOptions, BatchStrategy, QualitySign,
    SelectError,
};
use crate::trees::{TaxonomySpec, TreeError};
use crate::tw::{ArchMetric, DistanceError, KernelParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Taxonomy(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Model(#[from] GpError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Sequential,
    Batch,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "batch" => Ok(Mode::Batch),
            other => Err(format!("unknown mode `{other}` (expected sequential or batch)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Batch => "batch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// BO with the configured n-gram order.
    #[default]
    BoTw,
    /// BO with bigram operation measures.
    BoTw2g,
    Random,
    Evolution,
    Batch(BatchStrategy),
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::BoTw => "bo-tw",
            Optimizer::BoTw2g => "bo-tw-2g",
            Optimizer::Random => "random",
            Optimizer::Evolution => "evolution",
            Optimizer::Batch(b) => b.name(),
        }
    }
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bo-tw" => Ok(Optimizer::BoTw),
            "bo-tw-2g" => Ok(Optimizer::BoTw2g),
            "random" => Ok(Optimizer::Random),
            "evolution" => Ok(Optimizer::Evolution),
            other => other.parse::<BatchStrategy>().map(Optimizer::Batch).map_err(|_| {
                format!("unknown optimizer `{other}` (expected bo-tw, bo-tw-2g, random, evolution, kdpp-quality, kdpp, ts or bucb)")
            }),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where evaluations come from.
#[derive(Clone, Debug, PartialEq)]
pub enum SpaceSource {
    Synthetic { ops: Vec<String>, min_nodes: usize, max_nodes: usize, max_edges: usize, seed: u64 },
    Tabular(PathBuf),
}

impl Default for SpaceSource {
    fn default() -> Self {
        SpaceSource::Synthetic {
            ops: vec!["cv1".into(), "cv3".into(), "mp3".into()],
            min_nodes: 2,
            max_nodes: 5,
            max_edges: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub optimizer: Optimizer,
    pub budget: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    pub init_fraction: f64,
    pub kappa: f64,
    pub ngram: usize,
    pub seeds: Vec<u64>,
    pub space: SpaceSource,
    pub output: Option<PathBuf>,
    pub quality_sign: QualitySign,
    pub acquisition: AcquisitionKind,
    pub mutate_rounds: usize,
    pub hyper_starts: usize,
    pub hyper_iters: usize,
    /// Taxonomy file; the built-in default when unset.
    pub taxonomy: Option<PathBuf>,
    /// Record wall-clock milliseconds; off keeps results bytewise reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Sequential,
            optimizer: Optimizer::BoTw,
            budget: 40,
            batch_size: 5,
            pool_size: 100,
            init_fraction: 0.1,
            kappa: 2.0,
            ngram: 1,
            seeds: vec![0],
            space: SpaceSource::default(),
            output: None,
            quality_sign: QualitySign::Positive,
            acquisition: AcquisitionKind::Ucb,
            mutate_rounds: 5,
            hyper_starts: 5,
            hyper_iters: 100,
            taxonomy: None,
            timing: false,
        }
    }
}

/// Parses `a..b` (inclusive), `a..=b` or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range `{s}`"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range `{s}`"))?;
        if lo > hi {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|t| t.trim().parse::<u64>().map_err(|_| format!("bad seed `{t}`"))).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), msg: format!("`{v}` is not a number") })
        }
        let bad = |msg: String| ConfigError::BadValue { key: key.into(), msg };
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse().map_err(bad)?,
            "optimizer" => self.optimizer = v.parse().map_err(bad)?,
            "budget" => self.budget = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "pool_size" => self.pool_size = num(key, v)?,
            "init_fraction" => self.init_fraction = num(key, v)?,
            "kappa" => self.kappa = num(key, v)?,
            "ngram" => self.ngram = num(key, v)?,
            "seeds" => self.seeds = parse_seeds(v).map_err(bad)?,
            "output" => self.output = Some(PathBuf::from(v)),
            "quality_sign" => self.quality_sign = v.parse().map_err(bad)?,
            "acquisition" => self.acquisition = v.parse().map_err(bad)?,
            "mutate_rounds" => self.mutate_rounds = num(key, v)?,
            "hyper_starts" => self.hyper_starts = num(key, v)?,
            "hyper_iters" => self.hyper_iters = num(key, v)?,
            "taxonomy" => self.taxonomy = Some(PathBuf::from(v)),
            "timing" => self.timing = parse_bool(v).map_err(bad)?,
            "tabular" => self.space = SpaceSource::Tabular(PathBuf::from(v)),
            "ops" | "min_nodes" | "max_nodes" | "max_edges" | "space_seed" => {
                if let SpaceSource::Tabular(_) = self.space {
                    self.space = SpaceSource::default();
                }
                let SpaceSource::Synthetic { ops, min_nodes, max_nodes, max_edges, seed } = &mut self.space else {
                    unreachable!()
                };
                match key {
                    "ops" => *ops = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                    "min_nodes" => *min_nodes = num(key, v)?,
                    "max_nodes" => *max_nodes = num(key, v)?,
                    "max_edges" => *max_edges = num(key, v)?,
                    _ => *seed = num(key, v)?,
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Reads flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn init_count(&self) -> usize {
        ((self.init_fraction * self.budget as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return fail("init_fraction must be in (0, 1]");
        }
        let init = self.init_count();
        if init < 1 || init > self.budget {
            return fail("need budget >= initial evaluations >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.seeds.is_empty() {
            return fail("no seeds given");
        }
        if self.pool_size < 1 {
            return fail("pool_size must be at least 1");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return fail("kappa must be a nonnegative number");
        }
        if !(1..=2).contains(&self.ngram) {
            return fail("ngram must be 1 or 2");
        }
        match (self.mode, self.optimizer) {
            (Mode::Batch, Optimizer::Batch(_)) | (Mode::Sequential, Optimizer::BoTw | Optimizer::BoTw2g) => Ok(()),
            (Mode::Sequential, Optimizer::Random | Optimizer::Evolution) => Ok(()),
            (Mode::Batch, o) => fail(&format!("batch mode needs a batch strategy, not `{o}`")),
            (Mode::Sequential, o) => fail(&format!("`{o}` is a batch strategy; use mode = batch")),
        }
    }

    pub fn taxonomy_spec(&self) -> Result<TaxonomySpec, ConfigError> {
        match &self.taxonomy {
            Some(p) => Ok(TaxonomySpec::parse(&std::fs::read_to_string(p)?)?),
            None => Ok(TaxonomySpec::default_nb()),
        }
    }

    /// Builds (or loads) the evaluation table.
    pub fn build_oracle(&self) -> Result<BenchmarkOracle, RunError> {
        match &self.space {
            SpaceSource::Synthetic { ops, min_nodes, max_nodes, max_edges, seed } => {
                let space = SpaceSpec::new(Vocabulary::new(ops.iter().cloned()), *min_nodes, *max_nodes, *max_edges)
                    .map_err(ConfigError::from)?;
                Ok(synth_space(&space, *seed)?)
            }
            SpaceSource::Tabular(p) => Ok(load_tabular(p)?),
        }
    }

    fn ngram_order(&self) -> usize {
        match self.optimizer {
            Optimizer::BoTw2g => 2,
            _ => self.ngram,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub iter: usize,
    pub key: String,
    pub val: f64,
    pub best_val: f64,
    pub best_test: f64,
    pub cum_cost: f64,
    pub wall_ms: u64,
}

pub const RESULTS_HEADER: [&str; 8] = ["seed", "iter", "key", "val", "best_val", "best_test", "cum_cost", "wall_ms"];

// Independent random streams per purpose, derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_POOL: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_HYPER: u64 = 4;
const STREAM_MUTATE: u64 = 5;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Evaluated history of one run plus its record bookkeeping.
struct Tracker<'a> {
    oracle: &'a BenchmarkOracle,
    seed: u64,
    batch: usize,
    start: Instant,
    timing: bool,
    xs: Vec<Architecture>,
    ys: Vec<f64>,
    keys: HashSet<String>,
    best_val: f64,
    best_test: f64,
    cost: f64,
    records: Vec<RunRecord>,
}

impl<'a> Tracker<'a> {
    fn new(oracle: &'a BenchmarkOracle, seed: u64, batch: usize, timing: bool) -> Self {
        Tracker {
            oracle,
            seed,
            batch,
            start: Instant::now(),
            timing,
            xs: Vec::new(),
            ys: Vec::new(),
            keys: HashSet::new(),
            best_val: f64::NEG_INFINITY,
            best_test: f64::NAN,
            cost: 0.0,
            records: Vec::new(),
        }
    }

    /// Evaluation `k` (1-based) belongs to iteration `(k - 1) / batch + 1`.
    fn evaluate(&mut self, arch: Architecture) -> Result<(), RunError> {
        let iter = self.xs.len() / self.batch + 1;
        let e = self.oracle.query(&arch)?;
        let key = canonical_key(&arch);
        debug_assert!(!self.keys.contains(&key), "re-evaluated {key}");
        if e.val_score > self.best_val {
            self.best_val = e.val_score;
            self.best_test = e.test_score;
        }
        self.cost += e.cost;
        self.records.push(RunRecord {
            seed: self.seed,
            iter,
            key: key.clone(),
            val: e.val_score,
            best_val: self.best_val,
            best_test: self.best_test,
            cum_cost: self.cost,
            wall_ms: if self.timing { self.start.elapsed().as_millis() as u64 } else { 0 },
        });
        self.keys.insert(key);
        self.xs.push(arch);
        self.ys.push(e.val_score);
        Ok(())
    }

    fn unevaluated(&self) -> Vec<Architecture> {
        self.oracle.entries().filter(|(k, _, _)| !self.keys.contains(*k)).map(|(_, a, _)| a.clone()).collect()
    }

    fn evaluated_count(&self) -> usize {
        self.xs.len()
    }
}

/// Draws `k` distinct unevaluated table members uniformly.
fn random_unevaluated<R: Rng + ?Sized>(t: &Tracker, k: usize, rng: &mut R) -> Vec<Architecture> {
    let rest = t.unevaluated();
    rest.choose_multiple(rng, k.min(rest.len())).cloned().collect()
}

fn initial_design(t: &mut Tracker, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<(), RunError> {
    let n = cfg.init_count().min(cfg.budget);
    for a in random_unevaluated(t, n, rng) {
        t.evaluate(a)?;
    }
    Ok(())
}

pub fn run_random(cfg: &ExperimentConfig, oracle: &BenchmarkOracle, seed: u64) -> Result<Vec<RunRecord>, RunError> {
    let mut t = Tracker::new(oracle, seed, 1, cfg.timing);
    let mut rng = stream(seed, STREAM_INIT);
    for a in random_unevaluated(&t, cfg.budget, &mut rng) {
        t.evaluate(a)?;
    }
    Ok(t.records)
}

/// Elitist evolution: mutate a uniformly chosen member of the ten best
/// evaluated architectures, no surrogate.
pub fn run_baseline_evolution(
    cfg: &ExperimentConfig,
    oracle: &BenchmarkOracle,
    seed: u64,
) -> Result<Vec<RunRecord>, RunError> {
    let mut t = Tracker::new(oracle, seed, 1, cfg.timing);
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut rng = stream(seed, STREAM_MUTATE);
    initial_design(&mut t, cfg, &mut init_rng)?;
    let space = oracle.space().clone();
    while t.evaluated_count() < cfg.budget && t.evaluated_count() < oracle.len() {
        let mut order: Vec<usize> = (0..t.xs.len()).collect();
        order.sort_by(|&a, &b| t.ys[b].total_cmp(&t.ys[a]));
        order.truncate(10);
        let mut child = None;
        for _ in 0..50 {
            let parent = &t.xs[*order.choose(&mut rng).expect("history is nonempty")];
            let m = mutate(parent, &space, &mut rng);
            let key = canonical_key(&m);
            if !t.keys.contains(&key) && oracle.contains_key(&key) {
                child = Some(m);
                break;
            }
        }
        let child = match child {
            Some(c) => c,
            None => random_unevaluated(&t, 1, &mut rng).pop().expect("table has unevaluated members"),
        };
        t.evaluate(child)?;
    }
    Ok(t.records)
}

fn hyper_bounds() -> HyperBounds {
    HyperBounds::default()
}

/// GP-driven search. `strategy = None` selects one candidate per iteration
/// by acquisition argmax; `Some(s)` selects `batch_size` with `s`.
fn run_bo(
    cfg: &ExperimentConfig,
    oracle: &BenchmarkOracle,
    seed: u64,
    strategy: Option<BatchStrategy>,
) -> Result<Vec<RunRecord>, RunError> {
    let batch = if strategy.is_some() { cfg.batch_size } else { 1 };
    let metric = Arc::new(ArchMetric::new(cfg.taxonomy_spec()?, cfg.ngram_order())?);
    let mut t = Tracker::new(oracle, seed, batch, cfg.timing);
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut pool_rng = stream(seed, STREAM_POOL);
    let mut select_rng = stream(seed, STREAM_SELECT);
    let mut hyper_rng = stream(seed, STREAM_HYPER);
    initial_design(&mut t, cfg, &mut init_rng)?;

    let space = oracle.space().clone();
    let pool_cfg = PoolConfig {
        size: cfg.pool_size,
        mutate_rounds: cfg.mutate_rounds,
        kind: cfg.acquisition,
        kappa: cfg.kappa,
        ..Default::default()
    };
    let opts = BatchOptions { kappa: cfg.kappa, sign: cfg.quality_sign };
    let mut theta = KernelParams::default();

    while t.evaluated_count() < cfg.budget && t.evaluated_count() < oracle.len() {
        let q = batch.min(cfg.budget - t.evaluated_count());
        let iter = t.evaluated_count() / batch + 1;
        let dists = metric.component_matrices(&t.xs)?;
        let hcfg = HyperOptConfig {
            starts: cfg.hyper_starts.max(1),
            max_iters: cfg.hyper_iters,
            seed: hyper_rng.next_u64(),
            ..Default::default()
        };
        match optimize_on_distances(&dists, &standardize(&t.ys), &hyper_bounds(), &hcfg, Some(theta)) {
            Ok(r) => theta = r.params,
            Err(e) => warn!("seed {seed} iter {iter}: hyperparameter search failed ({e}); keeping previous values"),
        }
        let model = GpModel::fit_with_distances(metric.clone(), &t.xs, &t.ys, dists, theta)?;

        let mut pool = generate_pool(&model, &t.xs, &space, &pool_cfg, |a| oracle.contains(a), &mut pool_rng)?;
        if pool.len() < q {
            let have: HashSet<String> = pool.iter().map(canonical_key).collect();
            let mut extra: Vec<Architecture> =
                t.unevaluated().into_iter().filter(|a| !have.contains(&canonical_key(a))).collect();
            extra.shuffle(&mut pool_rng);
            info!("seed {seed} iter {iter}: pool has {} < {q} candidates; padding from the table", pool.len());
            pool.extend(extra.into_iter().take(q - pool.len()));
        }

        let picks = match strategy {
            None => vec![argmax_acquisition(&model, &pool, cfg.acquisition, cfg.kappa)?],
            Some(s) => select_batch(&model, &pool, s, q, &opts, &mut select_rng)?,
        };
        for i in picks {
            t.evaluate(pool[i].clone())?;
        }
    }
    Ok(t.records)
}

// Batch selection; a k-DPP short of rank is topped up by UCB order.
fn select_batch(
    model: &GpModel,
    pool: &[Architecture],
    s: BatchStrategy,
    q: usize,
    opts: &BatchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, RunError> {
    match batch_select(model, pool, s, q, opts, rng) {
        Ok(v) => Ok(v),
        Err(SelectError::RankDeficient(_, rank)) => {
            warn!("{s}: kernel rank {rank} below batch {q}; filling by UCB");
            let mut picks = if rank > 0 { batch_select(model, pool, s, rank, opts, rng)? } else { Vec::new() };
            let scores = acquisition_scores(model, pool, AcquisitionKind::Ucb, opts.kappa)?;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            for i in order {
                if picks.len() == q {
                    break;
                }
                if !picks.contains(&i) {
                    picks.push(i);
                }
            }
            Ok(picks)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn run_sequential(cfg: &ExperimentConfig, oracle: &BenchmarkOracle, seed: u64) -> Result<Vec<RunRecord>, RunError> {
    match cfg.optimizer {
        Optimizer::Random => run_random(cfg, oracle, seed),
        Optimizer::Evolution => run_baseline_evolution(cfg, oracle, seed),
        _ => run_bo(cfg, oracle, seed, None),
    }
}

pub fn run_batch(cfg: &ExperimentConfig, oracle: &BenchmarkOracle, seed: u64) -> Result<Vec<RunRecord>, RunError> {
    let Optimizer::Batch(s) = cfg.optimizer else {
        return Err(ConfigError::Invalid(format!("batch mode needs a batch strategy, not `{}`", cfg.optimizer)).into());
    };
    run_bo(cfg, oracle, seed, Some(s))
}

/// Runs every seed (in parallel) and merges records by `(seed, iter)`.
pub fn run_experiment(cfg: &ExperimentConfig, oracle: &BenchmarkOracle) -> Result<Vec<RunRecord>, RunError> {
    cfg.validate()?;
    let per_seed: Vec<Result<Vec<RunRecord>, RunError>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match cfg.mode {
            Mode::Sequential => run_sequential(cfg, oracle, seed),
            Mode::Batch => run_batch(cfg, oracle, seed),
        })
        .collect();
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    all.sort_by_key(|r| (r.seed, r.iter));
    Ok(all)
}

pub fn write_records<W: Write>(records: &[RunRecord], w: W) -> Result<(), RunError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULTS_HEADER)?;
    for r in records {
        out.write_record([
            r.seed.to_string(),
            r.iter.to_string(),
            r.key.clone(),
            r.val.to_string(),
            r.best_val.to_string(),
            r.best_test.to_string(),
            r.cum_cost.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_records(records: &[RunRecord], path: impl AsRef<Path>) -> Result<(), RunError> {
    write_records(records, std::fs::File::create(path)?)
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>, RunError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(BenchError::ParseError(1, format!("expected header {}", RESULTS_HEADER.join(","))).into());
    }
    Ok(rdr.deserialize().collect::<Result<Vec<RunRecord>, _>>()?)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, RunError> {
    read_records(std::fs::File::open(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub iteration: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n_seeds: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile band of `best_val` across seeds per iteration.
/// With several records per iteration the last one counts.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut last: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for r in records {
        last.insert((r.iter, r.seed), r.best_val);
    }
    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((iter, _), v) in last {
        by_iter.entry(iter).or_default().push(v);
    }
    by_iter
        .into_iter()
        .map(|(iteration, mut v)| {
            v.sort_by(f64::total_cmp);
            SummaryRow {
                iteration,
                median: quantile(&v, 0.5),
                q25: quantile(&v, 0.25),
                q75: quantile(&v, 0.75),
                n_seeds: v.len(),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: W) -> Result<(), RunError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-seed value of `best_val` at the end of `iter` (or the last record
/// before it).
pub fn best_at(records: &[RunRecord], iter: usize) -> BTreeMap<u64, f64> {
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| r.iter <= iter) {
        out.insert(r.seed, r.best_val);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ExperimentConfig, BenchmarkOracle) {
        let cfg = ExperimentConfig {
            budget: 12,
            pool_size: 20,
            hyper_starts: 2,
            hyper_iters: 20,
            space: SpaceSource::Synthetic {
                ops: vec!["cv1".into(), "cv3".into(), "mp3".into()],
                min_nodes: 2,
                max_nodes: 4,
                max_edges: 6,
                seed: 1,
            },
            ..Default::default()
        };
        let oracle = cfg.build_oracle().unwrap();
        (cfg, oracle)
    }

    fn check_run(records: &[RunRecord], budget: usize) {
        assert_eq!(records.len(), budget);
        let keys: HashSet<&str> = records.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys.len(), records.len());
        for w in records.windows(2) {
            assert!(w[1].best_val >= w[0].best_val);
            assert!(w[1].iter >= w[0].iter);
        }
        for (i, r) in records.iter().enumerate() {
            assert!((r.cum_cost - 0.7 * (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn config_parsing_and_overrides() {
        let text = "# demo\nmode = batch\noptimizer = kdpp-quality\nbudget = 100 # total\nbatch_size = 5\nseeds = 0..29\nquality_sign = -1\nmax_nodes = 4\n";
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode::Batch);
        assert_eq!(cfg.optimizer, Optimizer::Batch(BatchStrategy::KdppQuality));
        assert_eq!(cfg.seeds.len(), 30);
        assert_eq!(cfg.quality_sign, QualitySign::Negative);
        assert!(matches!(cfg.space, SpaceSource::Synthetic { max_nodes: 4, .. }));
        cfg.validate().unwrap();
        cfg.set("optimizer", "bo-tw").unwrap();
        assert!(cfg.validate().is_err());
        assert!(matches!(ExperimentConfig::parse("budget 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("colour = red"), Err(ConfigError::UnknownKey(_))));
        assert_eq!(parse_seeds("3,5").unwrap(), vec![3, 5]);
        assert_eq!(parse_seeds("1..=2").unwrap(), vec![1, 2]);
    }

    #[test]
    fn init_counts() {
        let mut cfg = ExperimentConfig { budget: 40, ..Default::default() };
        assert_eq!(cfg.init_count(), 4);
        cfg.budget = 41;
        assert_eq!(cfg.init_count(), 5);
        cfg.init_fraction = 1.0;
        cfg.budget = 3;
        assert_eq!(cfg.init_count(), 3);
    }

    #[test]
    fn pure_random_when_init_covers_budget() {
        let (mut cfg, oracle) = small();
        cfg.budget = 3;
        cfg.init_fraction = 1.0;
        let r = run_sequential(&cfg, &oracle, 0).unwrap();
        check_run(&r, 3);
    }

    #[test]
    fn sequential_bo_runs_are_sane_and_reproducible() {
        let (cfg, oracle) = small();
        let a = run_sequential(&cfg, &oracle, 4).unwrap();
        check_run(&a, cfg.budget);
        assert_eq!(a, run_sequential(&cfg, &oracle, 4).unwrap());
        let best = a.last().unwrap();
        let (_, e) = oracle
            .entries()
            .find(|(k, _, _)| a.iter().any(|r| r.key == *k && r.val == best.best_val))
            .map(|(_, x, e)| (x, e))
            .unwrap();
        assert_eq!(e.test_score, best.best_test);
    }

    #[test]
    fn baselines() {
        let (mut cfg, oracle) = small();
        for opt in [Optimizer::Random, Optimizer::Evolution] {
            cfg.optimizer = opt;
            let r = run_sequential(&cfg, &oracle, 2).unwrap();
            check_run(&r, cfg.budget);
            assert_eq!(r, run_sequential(&cfg, &oracle, 2).unwrap());
        }
        cfg.budget = 1;
        cfg.optimizer = Optimizer::Evolution;
        assert_eq!(run_sequential(&cfg, &oracle, 0).unwrap().len(), 1);
    }

    #[test]
    fn batch_of_one_bucb_matches_sequential() {
        let (mut cfg, oracle) = small();
        let seq = run_sequential(&cfg, &oracle, 7).unwrap();
        cfg.mode = Mode::Batch;
        cfg.optimizer = Optimizer::Batch(BatchStrategy::Bucb);
        cfg.batch_size = 1;
        let bat = run_batch(&cfg, &oracle, 7).unwrap();
        assert_eq!(seq, bat);
    }

    #[test]
    fn batches_have_distinct_members() {
        let (mut cfg, oracle) = small();
        cfg.mode = Mode::Batch;
        cfg.budget = 20;
        cfg.init_fraction = 0.25;
        for s in BatchStrategy::ALL {
            cfg.optimizer = Optimizer::Batch(s);
            let r = run_batch(&cfg, &oracle, 1).unwrap();
            check_run(&r, 20);
            assert_eq!(r.last().unwrap().iter, 4);
        }
    }

    #[test]
    fn experiment_csv_round_trip_and_summary() {
        let (mut cfg, oracle) = small();
        cfg.optimizer = Optimizer::Random;
        cfg.seeds = vec![0, 1, 2];
        let r = run_experiment(&cfg, &oracle).unwrap();
        let mut bytes = Vec::new();
        write_records(&r, &mut bytes).unwrap();
        assert_eq!(read_records(bytes.as_slice()).unwrap(), r);
        let s = summarize(&r);
        assert_eq!(s.len(), cfg.budget);
        for w in s.windows(2) {
            assert!(w[1].median >= w[0].median);
        }
        for row in &s {
            assert!(row.q25 <= row.median && row.median <= row.q75);
            assert_eq!(row.n_seeds, 3);
        }
        let one: Vec<RunRecord> = r.iter().filter(|x| x.seed == 1).cloned().collect();
        for (row, rec) in summarize(&one).iter().zip(&one) {
            assert_eq!(row.median, rec.best_val);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
    }
}

//! Acquisition functions for sequential search and batch selection: quality
//! k-DPP, pure k-DPP, Thompson sampling and GP-BUCB.
//!
//! Scores are computed on the model's standardized scale. UCB ordering is
//! unchanged by the positive affine map back to target units.

use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::arch::Architecture;
use crate::gp::{factorize, GpError, GpModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectError {
    #[error("batch of {0} exceeds kernel rank {1}")]
    RankDeficient(usize, usize),
    #[error("conditioning block is singular")]
    SingularConditioningBlock,
    #[error("pool has {pool} candidates but the batch needs {batch}")]
    PoolTooSmall { pool: usize, batch: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] GpError),
}

/// Eigenvalues at or below this count as zero.
pub const RANK_TOL: f64 = 1e-10;

pub fn ucb(mean: f64, std: f64, kappa: f64) -> f64 {
    mean + kappa * std
}

/// Expected improvement over `best` for maximization.
pub fn ei(mean: f64, std: f64, best: f64) -> f64 {
    let gap = mean - best;
    if std <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / std;
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (gap * cdf + std * pdf).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AcquisitionKind {
    #[default]
    Ucb,
    Ei,
}

impl FromStr for AcquisitionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ucb" => Ok(AcquisitionKind::Ucb),
            "ei" => Ok(AcquisitionKind::Ei),
            other => Err(format!("unknown acquisition `{other}` (expected ucb or ei)")),
        }
    }
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Acquisition value of every pool member.
pub fn acquisition_scores(
    model: &GpModel,
    pool: &[Architecture],
    kind: AcquisitionKind,
    kappa: f64,
) -> Result<Vec<f64>, SelectError> {
    let (mean, var) = model.predict_marginals(pool)?;
    Ok(score_marginals(model, &mean, &var, kind, kappa))
}

fn score_marginals(
    model: &GpModel,
    mean: &DVector<f64>,
    var: &DVector<f64>,
    kind: AcquisitionKind,
    kappa: f64,
) -> Vec<f64> {
    let best = model.train_y_standardized().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best = if best.is_finite() { best } else { 0.0 };
    mean.iter()
        .zip(var.iter())
        .map(|(&m, &v)| {
            let s = v.max(0.0).sqrt();
            match kind {
                AcquisitionKind::Ucb => ucb(m, s, kappa),
                AcquisitionKind::Ei => ei(m, s, best),
            }
        })
        .collect()
}

/// Index of the pool member maximizing the acquisition (lowest index on ties).
pub fn argmax_acquisition(
    model: &GpModel,
    pool: &[Architecture],
    kind: AcquisitionKind,
    kappa: f64,
) -> Result<usize, SelectError> {
    let scores = acquisition_scores(model, pool, kind, kappa)?;
    argmax(&scores).ok_or(SelectError::PoolTooSmall { pool: pool.len(), batch: 1 })
}

/// Sign of the quality exponent. `Positive` favours high predicted scores;
/// `Negative` is the literal `exp(-mu)` form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QualitySign {
    #[default]
    Positive,
    Negative,
}

impl QualitySign {
    pub fn value(self) -> f64 {
        match self {
            QualitySign::Positive => 1.0,
            QualitySign::Negative => -1.0,
        }
    }
}

impl FromStr for QualitySign {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "+1" | "1" | "+" | "positive" => Ok(QualitySign::Positive),
            "-1" | "-" | "negative" => Ok(QualitySign::Negative),
            other => Err(format!("quality sign must be +1 or -1, got `{other}`")),
        }
    }
}

impl fmt::Display for QualitySign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QualitySign::Positive => "+1",
            QualitySign::Negative => "-1",
        })
    }
}

/// `K_ij = q_i Sigma_ij q_j` with `q_i = exp(sign * mu_i)` over a candidate pool.
#[derive(Clone, Debug)]
pub struct QualityKernel {
    pub matrix: DMatrix<f64>,
    pub pool: Vec<Architecture>,
}

pub fn quality_kernel(model: &GpModel, pool: &[Architecture], sign: QualitySign) -> Result<QualityKernel, SelectError> {
    let post = model.posterior(pool)?;
    let q: Vec<f64> = post.mean.iter().map(|m| (sign.value() * m).exp()).collect();
    let n = pool.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| q[i] * post.cov[(i, j)] * q[j]);
    Ok(QualityKernel { matrix, pool: pool.to_vec() })
}

/// Elementary symmetric polynomials `e[l][n]` of the first `n` values, for
/// `l <= k`.
fn elementary_symmetric(values: &[f64], k: usize) -> Vec<Vec<f64>> {
    let n = values.len();
    let mut e = vec![vec![0.0; n + 1]; k + 1];
    e[0].iter_mut().for_each(|v| *v = 1.0);
    for l in 1..=k {
        for m in 1..=n {
            e[l][m] = e[l][m - 1] + values[m - 1] * e[l - 1][m - 1];
        }
    }
    e
}

/// Exact sample of size `b` from the k-DPP with kernel `k`. Returns sorted
/// indices.
pub fn sample_kdpp<R: Rng + ?Sized>(k: &DMatrix<f64>, b: usize, rng: &mut R) -> Result<Vec<usize>, SelectError> {
    if b == 0 {
        return Err(SelectError::EmptyBatch);
    }
    let n = k.nrows();
    if b > n {
        return Err(SelectError::PoolTooSmall { pool: n, batch: b });
    }
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > RANK_TOL).count();
    if b > rank {
        return Err(SelectError::RankDeficient(b, rank));
    }
    // rescaling all eigenvalues leaves the k-DPP law unchanged and keeps the
    // polynomials in range
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
    let lambdas: Vec<f64> = eig.eigenvalues.iter().map(|&l| if l > RANK_TOL { l / top } else { 0.0 }).collect();
    let e = elementary_symmetric(&lambdas, b);

    // phase 1: pick b eigenvectors
    let mut chosen = Vec::with_capacity(b);
    let mut remaining = b;
    for m in (1..=n).rev() {
        if remaining == 0 {
            break;
        }
        if m == remaining {
            chosen.extend((0..m).rev());
            break;
        }
        let p = lambdas[m - 1] * e[remaining - 1][m - 1] / e[remaining][m];
        if rng.random::<f64>() < p {
            chosen.push(m - 1);
            remaining -= 1;
        }
    }

    // phase 2: projection sampling from the elementary DPP
    let mut v = DMatrix::from_fn(n, b, |r, c| eig.eigenvectors[(r, chosen[c])]);
    let mut items = Vec::with_capacity(b);
    while v.ncols() > 0 {
        let weights: Vec<f64> = (0..n).map(|i| v.row(i).norm_squared()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        // guard against landing on an item with no weight through rounding
        if weights[pick] <= 0.0 || items.contains(&pick) {
            pick = (0..n)
                .filter(|i| !items.contains(i))
                .max_by(|&a, &c| weights[a].total_cmp(&weights[c]).then(c.cmp(&a)))
                .expect("fewer items than columns");
        }
        items.push(pick);

        let cols = v.ncols();
        let pivot =
            (0..cols).max_by(|&a, &c| v[(pick, a)].abs().total_cmp(&v[(pick, c)].abs()).then(c.cmp(&a))).unwrap();
        let pcol = v.column(pivot).clone_owned();
        let pval = pcol[pick];
        let mut next = DMatrix::zeros(n, cols - 1);
        let mut k = 0;
        for c in 0..cols {
            if c == pivot {
                continue;
            }
            let factor = v[(pick, c)] / pval;
            let col = v.column(c) - &pcol * factor;
            next.set_column(k, &col);
            k += 1;
        }
        // re-orthonormalize (modified Gram-Schmidt)
        for c in 0..next.ncols() {
            for p in 0..c {
                let proj = next.column(p).dot(&next.column(c));
                let prev = next.column(p).clone_owned();
                let mut col = next.column_mut(c);
                col -= prev * proj;
            }
            let norm = next.column(c).norm();
            if norm > 0.0 {
                next.column_mut(c).scale_mut(1.0 / norm);
            }
        }
        v = next;
    }
    items.sort_unstable();
    Ok(items)
}

/// Schur complement `K_BB - K_BA K_AA^-1 K_AB` over the indices not in `cond`.
pub fn conditional_kernel(k: &DMatrix<f64>, cond: &[usize]) -> Result<DMatrix<f64>, SelectError> {
    let n = k.nrows();
    let rest: Vec<usize> = (0..n).filter(|i| !cond.contains(i)).collect();
    let kbb = DMatrix::from_fn(rest.len(), rest.len(), |i, j| k[(rest[i], rest[j])]);
    if cond.is_empty() {
        return Ok(kbb);
    }
    let kaa = DMatrix::from_fn(cond.len(), cond.len(), |i, j| k[(cond[i], cond[j])]);
    let kab = DMatrix::from_fn(cond.len(), rest.len(), |i, j| k[(cond[i], rest[j])]);
    let (ch, _) = factorize(&kaa).map_err(|_| SelectError::SingularConditioningBlock)?;
    let out = kbb - kab.transpose() * ch.solve(&kab);
    Ok((&out + out.transpose()) * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum BatchStrategy {
    #[default]
    KdppQuality,
    KdppPure,
    ThompsonSampling,
    Bucb,
}

impl BatchStrategy {
    pub const ALL: [BatchStrategy; 4] =
        [BatchStrategy::KdppQuality, BatchStrategy::KdppPure, BatchStrategy::ThompsonSampling, BatchStrategy::Bucb];

    pub fn name(self) -> &'static str {
        match self {
            BatchStrategy::KdppQuality => "kdpp-quality",
            BatchStrategy::KdppPure => "kdpp",
            BatchStrategy::ThompsonSampling => "ts",
            BatchStrategy::Bucb => "bucb",
        }
    }
}

impl fmt::Display for BatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BatchStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BatchStrategy::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown batch strategy `{s}` (expected kdpp-quality, kdpp, ts or bucb)"))
    }
}

/// Options shared by every batch strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub kappa: f64,
    pub sign: QualitySign,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { kappa: 2.0, sign: QualitySign::Positive }
    }
}

/// Chooses `b` distinct pool indices with the given strategy.
pub fn batch_select<R: Rng + ?Sized>(
    model: &GpModel,
    pool: &[Architecture],
    strategy: BatchStrategy,
    b: usize,
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Vec<usize>, SelectError> {
    if b == 0 {
        return Err(SelectError::EmptyBatch);
    }
    if pool.len() < b {
        return Err(SelectError::PoolTooSmall { pool: pool.len(), batch: b });
    }
    match strategy {
        BatchStrategy::KdppQuality => sample_kdpp(&quality_kernel(model, pool, opts.sign)?.matrix, b, rng),
        BatchStrategy::KdppPure => sample_kdpp(&model.predict_cov(pool)?, b, rng),
        BatchStrategy::ThompsonSampling => thompson(model, pool, b, rng),
        BatchStrategy::Bucb => bucb(model, pool, b, opts.kappa),
    }
}

fn thompson<R: Rng + ?Sized>(
    model: &GpModel,
    pool: &[Architecture],
    b: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SelectError> {
    let post = model.posterior(pool)?;
    let n = pool.len();
    let mut cov = post.cov.clone();
    for i in 0..n {
        cov[(i, i)] += 1e-8;
    }
    let (ch, _) = factorize(&cov)?;
    let l = ch.l();
    let mut draw = || {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &post.mean + &l * z
    };
    let mut picked: Vec<usize> = Vec::with_capacity(b);
    while picked.len() < b {
        let mut last = None;
        for _ in 0..10 {
            let f = draw();
            let best = argmax(f.as_slice()).expect("pool is nonempty");
            if !picked.contains(&best) {
                picked.push(best);
                last = None;
                break;
            }
            last = Some(f);
        }
        if let Some(f) = last {
            let best = argmax(
                &f.iter()
                    .enumerate()
                    .map(|(i, &v)| if picked.contains(&i) { f64::NEG_INFINITY } else { v })
                    .collect::<Vec<_>>(),
            )
            .expect("pool has unpicked members");
            debug!("thompson sampling fell back to next-best for slot {}", picked.len());
            picked.push(best);
        }
    }
    Ok(picked)
}

fn bucb(model: &GpModel, pool: &[Architecture], b: usize, kappa: f64) -> Result<Vec<usize>, SelectError> {
    let (mean, mut var) = model.predict_marginals(pool)?;
    let mut cov = if b > 1 { model.posterior(pool)?.cov } else { DMatrix::zeros(0, 0) };
    let noise = model.params().noise_var + model.jitter();
    let mut picked: Vec<usize> = Vec::with_capacity(b);
    for step in 0..b {
        let scores: Vec<f64> = score_marginals(model, &mean, &var, AcquisitionKind::Ucb, kappa)
            .into_iter()
            .enumerate()
            .map(|(i, s)| if picked.contains(&i) { f64::NEG_INFINITY } else { s })
            .collect();
        let j = argmax(&scores).expect("pool has unpicked members");
        picked.push(j);
        if step + 1 == b {
            break;
        }
        // hallucinate y_j = mu_j: the mean is unchanged, the covariance gets
        // a rank-one downdate
        let denom = cov[(j, j)].max(0.0) + noise;
        if denom <= 0.0 {
            continue;
        }
        let col = cov.column(j).clone_owned();
        cov -= &col * col.transpose() / denom;
        for i in 0..var.len() {
            var[i] -= col[i] * col[i] / denom;
        }
    }
    Ok(picked)
}

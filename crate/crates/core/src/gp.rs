//! Gaussian-process surrogate over architectures with the tree-Wasserstein
//! kernel `k(u, v) = exp(-l1 W_ops - l2 W_in - l3 W_out)`.
//!
//! Observations are standardized to zero mean and unit variance before
//! fitting; the kernel has unit amplitude on that scale. Hyperparameters are
//! `(l1, l2, l3, noise_var)` and are learned by maximizing the log marginal
//! likelihood with multi-start projected gradient ascent in log space.

use std::f64::consts::PI;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::arch::Architecture;
use crate::tw::{ArchMetric, ComponentMatrices, DistanceError, KernelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("kernel matrix is not positive definite even with jitter {0:e}")]
    SingularKernel(f64),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("every hyperparameter start failed")]
    AllStartsFailed,
    #[error("invalid hyperparameter bounds")]
    BadBounds,
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

/// Jitter schedule tried in order when the Cholesky factorization fails.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Factorizes `k` (adding escalating diagonal jitter on failure). Returns the
/// factor and the jitter that was needed.
pub fn factorize(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    for &jitter in &JITTER_SCHEDULE {
        let mut m = k.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = Cholesky::new(m) {
            if jitter > 0.0 {
                debug!("cholesky needed jitter {jitter:e} (n = {})", k.nrows());
            }
            return Ok((ch, jitter));
        }
    }
    Err(GpError::SingularKernel(*JITTER_SCHEDULE.last().unwrap()))
}

fn with_noise(k: &DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    let mut m = k.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += noise;
    }
    m
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log marginal likelihood of standardized targets `y` for a covariance with
/// noise already on the diagonal.
fn lml_from_factor(ch: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = ch.solve(y);
    let n = y.len() as f64;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det(ch) - 0.5 * n * (2.0 * PI).ln();
    (lml, alpha)
}

/// Log marginal likelihood of `y` under parameters `p` given the training
/// distance matrices.
pub fn lml(dists: &ComponentMatrices, y: &DVector<f64>, p: &KernelParams) -> Result<f64, GpError> {
    let cov = with_noise(&dists.kernel(p), p.noise_var);
    let (ch, _) = factorize(&cov)?;
    Ok(lml_from_factor(&ch, y).0)
}

/// LML and its gradient with respect to `(l1, l2, l3, noise_var)`:
/// `dL/dt = 1/2 tr((a a^T - C^-1) dC/dt)` with `dK/dl_i = -D_i * K` entrywise
/// and `dC/dnoise = I`.
pub fn lml_and_gradient(
    dists: &ComponentMatrices,
    y: &DVector<f64>,
    p: &KernelParams,
) -> Result<(f64, [f64; 4]), GpError> {
    let k = dists.kernel(p);
    let cov = with_noise(&k, p.noise_var);
    let (ch, _) = factorize(&cov)?;
    let (value, alpha) = lml_from_factor(&ch, y);
    let inv = ch.inverse();
    let n = y.len();
    let mut grad = [0.0; 4];
    for r in 0..n {
        for c in 0..n {
            let w = alpha[r] * alpha[c] - inv[(r, c)];
            let kw = w * k[(r, c)];
            for (g, d) in grad.iter_mut().zip(&dists.parts) {
                *g -= kw * d[(r, c)];
            }
            if r == c {
                grad[3] += w;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

// Affine map between raw and standardized targets.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Standardizer {
    mean: f64,
    scale: f64,
}

impl Standardizer {
    fn fit(y: &[f64]) -> Self {
        if y.is_empty() {
            return Standardizer { mean: 0.0, scale: 1.0 };
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Standardizer { mean, scale }
    }

    fn apply(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|v| (v - self.mean) / self.scale))
    }
}

/// Targets shifted to zero mean and scaled to unit variance (constant targets
/// are only shifted).
pub fn standardize(y: &[f64]) -> DVector<f64> {
    Standardizer::fit(y).apply(y)
}

/// Posterior mean and variance at one point, in the units of the training targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// Joint posterior over a set of points on the standardized scale.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// A fitted GP: training data, hyperparameters and the cached factor of
/// `K + noise_var * I` (plus any jitter that factorization needed).
#[derive(Clone)]
pub struct GpModel {
    metric: Arc<ArchMetric>,
    train_x: Vec<Architecture>,
    train_raw: Vec<f64>,
    train_y: DVector<f64>,
    standardizer: Standardizer,
    params: KernelParams,
    jitter: f64,
    dists: ComponentMatrices,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl std::fmt::Debug for GpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpModel")
            .field("n", &self.train_x.len())
            .field("params", &self.params)
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl GpModel {
    /// Zero-mean, unit-variance prior with no observations.
    pub fn prior(metric: Arc<ArchMetric>, params: KernelParams) -> Self {
        GpModel {
            metric,
            train_x: Vec::new(),
            train_raw: Vec::new(),
            train_y: DVector::zeros(0),
            standardizer: Standardizer { mean: 0.0, scale: 1.0 },
            params,
            jitter: 0.0,
            dists: ComponentMatrices { parts: [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)] },
            chol: None,
            alpha: DVector::zeros(0),
        }
    }

    pub fn fit(
        metric: Arc<ArchMetric>,
        xs: &[Architecture],
        ys: &[f64],
        params: KernelParams,
    ) -> Result<Self, GpError> {
        let dists = metric.component_matrices(xs)?;
        Self::fit_with_distances(metric, xs, ys, dists, params)
    }

    /// Fits reusing precomputed training distance matrices.
    pub fn fit_with_distances(
        metric: Arc<ArchMetric>,
        xs: &[Architecture],
        ys: &[f64],
        dists: ComponentMatrices,
        params: KernelParams,
    ) -> Result<Self, GpError> {
        if xs.len() != ys.len() {
            return Err(GpError::LengthMismatch { inputs: xs.len(), targets: ys.len() });
        }
        if xs.is_empty() {
            return Err(GpError::EmptyTrainingSet);
        }
        let standardizer = Standardizer::fit(ys);
        let train_y = standardizer.apply(ys);
        let cov = with_noise(&dists.kernel(&params), params.noise_var);
        let (chol, jitter) = factorize(&cov)?;
        let alpha = chol.solve(&train_y);
        Ok(GpModel {
            metric,
            train_x: xs.to_vec(),
            train_raw: ys.to_vec(),
            train_y,
            standardizer,
            params,
            jitter,
            dists,
            chol: Some(chol),
            alpha,
        })
    }

    pub fn metric(&self) -> &Arc<ArchMetric> {
        &self.metric
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn train_x(&self) -> &[Architecture] {
        &self.train_x
    }

    /// Observed targets in their original units.
    pub fn train_targets(&self) -> &[f64] {
        &self.train_raw
    }

    pub fn train_y_standardized(&self) -> &DVector<f64> {
        &self.train_y
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn distances(&self) -> &ComponentMatrices {
        &self.dists
    }

    pub fn factor(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.chol.as_ref()
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    /// Standard deviation of the training targets (the de-standardization scale).
    pub fn y_scale(&self) -> f64 {
        self.standardizer.scale
    }

    pub fn y_mean(&self) -> f64 {
        self.standardizer.mean
    }

    pub fn best_observed(&self) -> Option<f64> {
        self.train_raw.iter().copied().fold(None, |b, v| Some(b.map_or(v, |b: f64| b.max(v))))
    }

    /// Mean and (unclamped) variance on the standardized scale.
    pub fn predict_standardized(&self, x: &Architecture) -> Result<(f64, f64), GpError> {
        let Some(chol) = &self.chol else {
            return Ok((0.0, 1.0));
        };
        let kstar = DVector::from_iterator(
            self.train_x.len(),
            self.train_x
                .iter()
                .map(|t| self.metric.components(x, t).map(|c| c.kernel(&self.params)))
                .collect::<Result<Vec<_>, _>>()?,
        );
        let mean = kstar.dot(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&kstar).expect("cholesky factor has a positive diagonal");
        Ok((mean, 1.0 - v.norm_squared()))
    }

    /// Posterior mean and variance in target units; variance clamped at zero.
    pub fn predict(&self, x: &Architecture) -> Result<Prediction, GpError> {
        let (m, v) = self.predict_standardized(x)?;
        let s = self.standardizer;
        Ok(Prediction { mean: s.mean + s.scale * m, variance: s.scale * s.scale * v.max(0.0) })
    }

    /// Joint posterior over `xs` on the standardized scale. The covariance is
    /// `K** - K*^T (K + noise I)^-1 K*`, symmetrized, with eigenvalues clamped at 0.
    pub fn posterior(&self, xs: &[Architecture]) -> Result<Posterior, GpError> {
        let self_d = self.metric.component_matrices(xs)?;
        let prior = self_d.kernel(&self.params);
        let m = xs.len();
        let Some(chol) = &self.chol else {
            return Ok(Posterior { mean: DVector::zeros(m), cov: clamp_psd(&prior) });
        };
        let kstar = self.metric.cross_matrices(&self.train_x, xs)?.kernel(&self.params);
        let mean = kstar.transpose() * &self.alpha;
        let v = chol.l_dirty().solve_lower_triangular(&kstar).expect("cholesky factor has a positive diagonal");
        let cov = prior - v.transpose() * v;
        Ok(Posterior { mean, cov: clamp_psd(&cov) })
    }

    /// Standardized means and (unclamped) variances at each of `xs`.
    pub fn predict_marginals(&self, xs: &[Architecture]) -> Result<(DVector<f64>, DVector<f64>), GpError> {
        let m = xs.len();
        let Some(chol) = &self.chol else {
            return Ok((DVector::zeros(m), DVector::from_element(m, 1.0)));
        };
        let kstar = self.metric.cross_matrices(&self.train_x, xs)?.kernel(&self.params);
        let mean = kstar.transpose() * &self.alpha;
        let v = chol.l_dirty().solve_lower_triangular(&kstar).expect("cholesky factor has a positive diagonal");
        let var = DVector::from_iterator(m, v.column_iter().map(|c| 1.0 - c.norm_squared()));
        Ok((mean, var))
    }

    pub fn predict_cov(&self, xs: &[Architecture]) -> Result<DMatrix<f64>, GpError> {
        Ok(self.posterior(xs)?.cov)
    }

    /// `-1/2 y^T a - sum log diag(L) - n/2 log 2 pi` from the cached factor.
    pub fn log_marginal(&self) -> f64 {
        match &self.chol {
            Some(ch) => {
                let n = self.train_y.len() as f64;
                -0.5 * self.train_y.dot(&self.alpha) - 0.5 * log_det(ch) - 0.5 * n * (2.0 * PI).ln()
            }
            None => 0.0,
        }
    }

    pub fn lml_gradient(&self) -> [f64; 4] {
        let Some(chol) = &self.chol else {
            return [0.0; 4];
        };
        let k = self.dists.kernel(&self.params);
        let inv = chol.inverse();
        let n = self.train_y.len();
        let mut grad = [0.0; 4];
        for r in 0..n {
            for c in 0..n {
                let w = self.alpha[r] * self.alpha[c] - inv[(r, c)];
                for (g, d) in grad.iter_mut().zip(&self.dists.parts) {
                    *g -= w * k[(r, c)] * d[(r, c)];
                }
                if r == c {
                    grad[3] += w;
                }
            }
        }
        grad.map(|g| 0.5 * g)
    }
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// Box constraints `(low, high)` for `(l1, l2, l3, noise_var)`; the search
/// runs over their logarithms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperBounds {
    pub low: [f64; 4],
    pub high: [f64; 4],
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds { low: [1e-3, 1e-3, 1e-3, 1e-6], high: [1e3, 1e3, 1e3, 1.0] }
    }
}

impl HyperBounds {
    pub fn validate(&self) -> Result<(), GpError> {
        let ok = self.low.iter().zip(&self.high).all(|(&l, &h)| l > 0.0 && l < h && h.is_finite());
        if ok {
            Ok(())
        } else {
            Err(GpError::BadBounds)
        }
    }

    fn clamp_log(&self, z: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| z[i].clamp(self.low[i].ln(), self.high[i].ln()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperOptConfig {
    pub starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for HyperOptConfig {
    fn default() -> Self {
        HyperOptConfig { starts: 5, max_iters: 100, grad_tol: 1e-6, seed: 0 }
    }
}

/// One row of a hyperparameter trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperStep {
    pub iteration: usize,
    pub params: KernelParams,
    pub lml: f64,
}

#[derive(Clone, Debug)]
pub struct HyperResult {
    pub params: KernelParams,
    pub lml: f64,
    pub start: usize,
    pub trace: Vec<HyperStep>,
}

/// Multi-start projected gradient ascent on the LML in log-parameter space.
/// Start 0 is `warm` when given; the remaining starts are log-uniform draws
/// from `bounds`. The best start wins, ties going to the lower start index.
pub fn optimize_hypers(
    metric: &ArchMetric,
    xs: &[Architecture],
    ys: &[f64],
    bounds: &HyperBounds,
    config: &HyperOptConfig,
    warm: Option<KernelParams>,
) -> Result<HyperResult, GpError> {
    if xs.len() != ys.len() {
        return Err(GpError::LengthMismatch { inputs: xs.len(), targets: ys.len() });
    }
    if xs.is_empty() {
        return Err(GpError::EmptyTrainingSet);
    }
    let dists = metric.component_matrices(xs)?;
    optimize_on_distances(&dists, &standardize(ys), bounds, config, warm)
}

pub fn optimize_on_distances(
    dists: &ComponentMatrices,
    y: &DVector<f64>,
    bounds: &HyperBounds,
    config: &HyperOptConfig,
    warm: Option<KernelParams>,
) -> Result<HyperResult, GpError> {
    bounds.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<[f64; 4]> = (0..config.starts.max(1))
        .map(|s| {
            let random: [f64; 4] = std::array::from_fn(|i| rng.random_range(bounds.low[i].ln()..bounds.high[i].ln()));
            match warm {
                Some(w) if s == 0 => bounds.clamp_log(w.as_array().map(|v| v.max(1e-300).ln())),
                _ => random,
            }
        })
        .collect();

    let results: Vec<Option<HyperResult>> = starts
        .par_iter()
        .enumerate()
        .map(|(s, z0)| match ascend(dists, y, bounds, config, *z0) {
            Ok((params, lml, trace)) => Some(HyperResult { params, lml, start: s, trace }),
            Err(e) => {
                warn!("hyperparameter start {s} failed: {e}");
                None
            }
        })
        .collect();

    let mut best: Option<HyperResult> = None;
    for r in results.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| r.lml > b.lml) {
            best = Some(r);
        }
    }
    best.ok_or(GpError::AllStartsFailed)
}

fn to_params(z: &[f64; 4]) -> KernelParams {
    KernelParams::from_array(z.map(f64::exp))
}

fn ascend(
    dists: &ComponentMatrices,
    y: &DVector<f64>,
    bounds: &HyperBounds,
    config: &HyperOptConfig,
    z0: [f64; 4],
) -> Result<(KernelParams, f64, Vec<HyperStep>), GpError> {
    let lo: [f64; 4] = bounds.low.map(f64::ln);
    let hi: [f64; 4] = bounds.high.map(f64::ln);
    let mut z = z0;
    let (mut f, grad) = lml_and_gradient(dists, y, &to_params(&z))?;
    let mut g = log_gradient(&grad, &z);
    let mut trace = vec![HyperStep { iteration: 0, params: to_params(&z), lml: f }];
    let mut step: f64 = 0.1;

    for it in 1..=config.max_iters {
        // projected gradient: drop components pushing out of the box
        let pg: [f64; 4] = std::array::from_fn(|i| {
            let at_low = z[i] <= lo[i] + 1e-12 && g[i] < 0.0;
            let at_high = z[i] >= hi[i] - 1e-12 && g[i] > 0.0;
            if at_low || at_high {
                0.0
            } else {
                g[i]
            }
        });
        let norm = pg.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < config.grad_tol {
            break;
        }
        let pg_max = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut accepted = None;
        for _ in 0..40 {
            // cap any single log-coordinate move at 1
            let scale = step.min(1.0 / pg_max);
            let cand = bounds.clamp_log(std::array::from_fn(|i| z[i] + scale * pg[i]));
            let moved: f64 = (0..4).map(|i| (cand[i] - z[i]) * g[i]).sum();
            if moved <= 0.0 {
                step *= 0.5;
                continue;
            }
            match lml_and_gradient(dists, y, &to_params(&cand)) {
                Ok((fc, gc)) if fc > f + 1e-4 * moved => {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let improvement = fc - f;
        z = cand;
        f = fc;
        g = log_gradient(&gc, &z);
        step = (step * 2.0).min(1e3);
        trace.push(HyperStep { iteration: it, params: to_params(&z), lml: f });
        if improvement < 1e-10 * (1.0 + f.abs()) {
            break;
        }
    }
    Ok((to_params(&z), f, trace))
}

fn log_gradient(grad: &[f64; 4], z: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| grad[i] * z[i].exp())
}

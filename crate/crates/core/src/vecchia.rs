//! Single-layer Vecchia Gaussian process.
//!
//! The joint density of the responses is approximated by a product of
//! univariate conditionals, each observation conditioning on the noisy
//! responses of its conditioning set:
//!
//! ```text
//! μ_i  = K_{i,g} (K_{g,g} + τ² I)⁻¹ y_g
//! σ_i² = K_{i,i} − K_{i,g} (K_{g,g} + τ² I)⁻¹ K_{g,i}
//! −log L = Σ_i −log N(y_i | μ_i, σ_i² + τ²)
//! ```
//!
//! Every term is independent of the others, so a mini-batch costs
//! `O(n_b m³)` and terms are evaluated in parallel. Sums are always reduced
//! sequentially in index order so results do not depend on thread count.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{self, KernelError, KernelParams};
use crate::linalg::{Cholesky, LinalgError};
use crate::matrix::{dot, Matrix};
use crate::neighbors::ConditioningSets;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Box applied to every log hyperparameter after each optimizer step.
const LOG_PARAM_BOUND: f64 = 15.0;
/// Floor on the noise variance during fitting, on the standardized scale.
const MIN_NOISE_VAR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VecchiaError {
    #[error("dataset has {rows} embedding rows but {responses} responses")]
    RowMismatch { rows: usize, responses: usize },
    #[error("non-finite value in embeddings at ({row}, {col})")]
    NonFiniteEmbedding { row: usize, col: usize },
    #[error("non-finite response at index {0}")]
    NonFiniteResponse(usize),
    #[error("conditioning index {index} out of range for {n} training points")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("{sets} conditioning sets supplied for {expected} points")]
    SetCount { sets: usize, expected: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("conditional covariance for observation {observation} is singular: {source}")]
    Linalg {
        observation: usize,
        #[source]
        source: LinalgError,
    },
    #[error("hyperparameter optimization diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

/// Intermediate representations of one layer, paired with the responses
/// shared by every layer.
#[derive(Clone, Debug)]
pub struct EmbeddingDataset {
    embeddings: Arc<Matrix>,
    responses: Arc<Vec<f64>>,
    layer: usize,
}

impl EmbeddingDataset {
    pub fn new(embeddings: Arc<Matrix>, responses: Arc<Vec<f64>>, layer: usize) -> Result<Self, VecchiaError> {
        if embeddings.rows() != responses.len() {
            return Err(VecchiaError::RowMismatch {
                rows: embeddings.rows(),
                responses: responses.len(),
            });
        }
        if let Some((row, col)) = embeddings.first_non_finite() {
            return Err(VecchiaError::NonFiniteEmbedding { row, col });
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            return Err(VecchiaError::NonFiniteResponse(i));
        }
        Ok(Self {
            embeddings,
            responses,
            layer,
        })
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_arc(&self) -> &Arc<Matrix> {
        &self.embeddings
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn responses_arc(&self) -> &Arc<Vec<f64>> {
        &self.responses
    }

    /// Same embeddings with a different (shared) response vector.
    pub fn with_responses(&self, responses: Arc<Vec<f64>>) -> Result<Self, VecchiaError> {
        Self::new(self.embeddings.clone(), responses, self.layer)
    }
}

/// Per-point predictive moments of one Vecchia GP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    /// Variance of the latent function, `σ_f²`.
    pub var_latent: f64,
    /// `σ_f² + τ²`.
    pub var_observation: f64,
}

/// Centering and scaling moments of the training responses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaling {
    pub mean: f64,
    pub sd: f64,
}

impl ResponseScaling {
    /// Population mean and standard deviation; a constant response gets
    /// unit scale.
    pub fn from_responses(y: &[f64]) -> Self {
        if y.is_empty() {
            return Self { mean: 0.0, sd: 1.0 };
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, sd }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn unstandardize(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }

    pub fn standardize_all(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.standardize(v)).collect()
    }
}

/// Mini-batch Adam settings for [`fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 500,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// Fitted hyperparameters and the full-data negative log-likelihood
/// recorded before the first step and after every epoch.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: KernelParams,
    pub loss_trace: Vec<f64>,
}

/// Cached kernel scalars for one parameter setting.
struct Prepared {
    output_var: f64,
    noise_var: f64,
    inv_ls: Vec<f64>,
}

impl Prepared {
    fn new(p: &KernelParams) -> Self {
        Self {
            output_var: p.output_var(),
            noise_var: p.noise_var(),
            inv_ls: p.inv_lengthscales(),
        }
    }
}

fn check_indices(g: &[usize], n: usize) -> Result<(), VecchiaError> {
    match g.iter().find(|&&j| j >= n) {
        Some(&index) => Err(VecchiaError::IndexOutOfRange { index, n }),
        None => Ok(()),
    }
}

fn check_dim(ds: &EmbeddingDataset, p: &KernelParams) -> Result<(), VecchiaError> {
    if ds.dim() != p.dim() {
        return Err(KernelError::Dimension {
            expected: p.dim(),
            found: ds.dim(),
        }
        .into());
    }
    Ok(())
}

/// `(K_gg + τ² I)` for the listed rows.
fn noisy_block(e: &Matrix, g: &[usize], pr: &Prepared) -> Matrix {
    let q = g.len();
    let mut a = Matrix::zeros(q, q);
    for r in 0..q {
        a[(r, r)] = pr.output_var + pr.noise_var;
        let xr = e.row(g[r]);
        for c in 0..r {
            let v = kernel::eval_unchecked(xr, e.row(g[c]), pr.output_var, &pr.inv_ls);
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
    }
    a
}

/// Latent conditional mean and variance of `target` given the noisy
/// responses at `g`. Variance is clamped at zero.
fn moments(
    e: &Matrix,
    y: &[f64],
    g: &[usize],
    target: &[f64],
    pr: &Prepared,
    observation: usize,
) -> Result<(f64, f64), VecchiaError> {
    if g.is_empty() {
        return Ok((0.0, pr.output_var));
    }
    let a = noisy_block(e, g, pr);
    let (chol, _) = Cholesky::factor_with_jitter(&a).map_err(|source| VecchiaError::Linalg { observation, source })?;
    let kg: Vec<f64> = g
        .iter()
        .map(|&j| kernel::eval_unchecked(target, e.row(j), pr.output_var, &pr.inv_ls))
        .collect();
    let yg: Vec<f64> = g.iter().map(|&j| y[j]).collect();
    // μ = kᵀ A⁻¹ y = (L⁻¹k)ᵀ (L⁻¹y); σ² = k(t,t) − ‖L⁻¹k‖²
    let w = chol.half_solve(&kg);
    let z = chol.half_solve(&yg);
    let mean = dot(&w, &z);
    let var = (pr.output_var - dot(&w, &w)).max(0.0);
    Ok((mean, var))
}

/// Conditional moments `(μ, σ_f²)` of a target location given the
/// responses of the conditioning set `g`. An empty set yields the prior
/// `(0, σ²)`.
pub fn conditional_moments(
    ds: &EmbeddingDataset,
    g: &[usize],
    target: &[f64],
    p: &KernelParams,
) -> Result<(f64, f64), VecchiaError> {
    check_dim(ds, p)?;
    if target.len() != p.dim() {
        return Err(KernelError::Dimension {
            expected: p.dim(),
            found: target.len(),
        }
        .into());
    }
    check_indices(g, ds.n())?;
    moments(ds.embeddings(), ds.responses(), g, target, &Prepared::new(p), 0)
}

fn check_sets(ds: &EmbeddingDataset, sets: &ConditioningSets) -> Result<(), VecchiaError> {
    if sets.len() != ds.n() {
        return Err(VecchiaError::SetCount {
            sets: sets.len(),
            expected: ds.n(),
        });
    }
    sets.sets.iter().try_for_each(|g| check_indices(g, ds.n()))
}

fn term(y: f64, mean: f64, var_obs: f64) -> f64 {
    let r = y - mean;
    0.5 * (LN_2PI + var_obs.ln()) + r * r / (2.0 * var_obs)
}

fn batch_indices(n: usize, batch: Option<&[usize]>) -> Result<Vec<usize>, VecchiaError> {
    match batch {
        Some(b) => {
            check_indices(b, n)?;
            Ok(b.to_vec())
        }
        None => Ok((0..n).collect()),
    }
}

/// Negative Vecchia log-likelihood summed over `batch` (all observations
/// when `None`).
pub fn vecchia_nll(
    ds: &EmbeddingDataset,
    sets: &ConditioningSets,
    p: &KernelParams,
    batch: Option<&[usize]>,
) -> Result<f64, VecchiaError> {
    check_dim(ds, p)?;
    check_sets(ds, sets)?;
    let idx = batch_indices(ds.n(), batch)?;
    let pr = Prepared::new(p);
    let (e, y) = (ds.embeddings(), ds.responses());
    let terms = idx
        .par_iter()
        .map(|&i| {
            let (mean, var) = moments(e, y, sets.get(i), e.row(i), &pr, i)?;
            Ok(term(y[i], mean, var + pr.noise_var))
        })
        .collect::<Result<Vec<f64>, VecchiaError>>()?;
    Ok(terms.iter().sum())
}

/// One observation's NLL term and its gradient in the
/// `(log σ², log λ, log τ²)` layout.
fn term_and_grad(e: &Matrix, y: &[f64], i: usize, g: &[usize], pr: &Prepared) -> Result<(f64, Vec<f64>), VecchiaError> {
    let d = pr.inv_ls.len();
    let np = d + 2;
    let mut grad = vec![0.0; np];
    let xi = e.row(i);
    let q = g.len();
    if q == 0 {
        // prior term: v = σ² + τ²
        let v = pr.output_var + pr.noise_var;
        let r = y[i];
        let dterm_dv = 0.5 / v - r * r / (2.0 * v * v);
        grad[0] = dterm_dv * pr.output_var;
        grad[np - 1] = dterm_dv * pr.noise_var;
        return Ok((term(r, 0.0, v), grad));
    }

    // Kernel block, its derivatives (d+1 slices of q×q) and the cross terms.
    let mut a = Matrix::zeros(q, q);
    let mut da = vec![0.0; (d + 1) * q * q];
    let mut buf = vec![0.0; d + 1];
    for r in 0..q {
        a[(r, r)] = pr.output_var + pr.noise_var;
        da[r * q + r] = pr.output_var;
        let xr = e.row(g[r]);
        for c in 0..r {
            let v = kernel::grad_unchecked(xr, e.row(g[c]), pr.output_var, &pr.inv_ls, &mut buf);
            a[(r, c)] = v;
            a[(c, r)] = v;
            for t in 0..=d {
                da[t * q * q + r * q + c] = buf[t];
                da[t * q * q + c * q + r] = buf[t];
            }
        }
    }
    let mut kg = vec![0.0; q];
    let mut dk = vec![0.0; (d + 1) * q];
    for r in 0..q {
        kg[r] = kernel::grad_unchecked(xi, e.row(g[r]), pr.output_var, &pr.inv_ls, &mut buf);
        for t in 0..=d {
            dk[t * q + r] = buf[t];
        }
    }
    let (chol, _) = Cholesky::factor_with_jitter(&a).map_err(|source| VecchiaError::Linalg { observation: i, source })?;
    let yg: Vec<f64> = g.iter().map(|&j| y[j]).collect();
    let alpha = chol.solve(&yg);
    let beta = chol.solve(&kg);
    let mean = dot(&kg, &alpha);
    let v = pr.output_var - dot(&kg, &beta) + pr.noise_var;
    let r = y[i] - mean;

    let dterm = |dmu: f64, dv: f64| 0.5 * dv / v - r * dmu / v - r * r * dv / (2.0 * v * v);
    let quad = |m: &[f64], u: &[f64], w: &[f64]| -> f64 {
        let mut s = 0.0;
        for rr in 0..q {
            s += u[rr] * dot(&m[rr * q..(rr + 1) * q], w);
        }
        s
    };
    for t in 0..=d {
        let dat = &da[t * q * q..(t + 1) * q * q];
        let dkt = &dk[t * q..(t + 1) * q];
        let dmu = dot(dkt, &alpha) - quad(dat, &beta, &alpha);
        let dkii = if t == 0 { pr.output_var } else { 0.0 };
        let dv = dkii - 2.0 * dot(dkt, &beta) + quad(dat, &beta, &beta);
        grad[t] = dterm(dmu, dv);
    }
    // noise: ∂A = τ² I, ∂k = 0
    let dmu = -pr.noise_var * dot(&beta, &alpha);
    let dv = pr.noise_var * dot(&beta, &beta) + pr.noise_var;
    grad[np - 1] = dterm(dmu, dv);
    Ok((term(y[i], mean, v), grad))
}

/// Negative Vecchia log-likelihood and its gradient with respect to
/// `(log σ², log λ_1..log λ_d, log τ²)`.
pub fn vecchia_nll_grad(
    ds: &EmbeddingDataset,
    sets: &ConditioningSets,
    p: &KernelParams,
    batch: Option<&[usize]>,
) -> Result<(f64, Vec<f64>), VecchiaError> {
    check_dim(ds, p)?;
    check_sets(ds, sets)?;
    let idx = batch_indices(ds.n(), batch)?;
    let pr = Prepared::new(p);
    let (e, y) = (ds.embeddings(), ds.responses());
    let parts = idx
        .par_iter()
        .map(|&i| term_and_grad(e, y, i, sets.get(i), &pr))
        .collect::<Result<Vec<_>, VecchiaError>>()?;
    let mut total = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (t, g) in parts {
        total += t;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((total, grad))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Starting point for [`fit`]: `σ² = 1`, `τ² = 0.01`, and each lengthscale
/// set to the median absolute pairwise difference along its dimension over
/// an evenly strided subsample of at most 1024 points. Degenerate dimensions
/// get lengthscale 1.
pub fn default_init(ds: &EmbeddingDataset) -> KernelParams {
    let n = ds.n();
    let stride = n.div_ceil(1024).max(1);
    let sub: Vec<usize> = (0..n).step_by(stride).collect();
    let e = ds.embeddings();
    let log_lengthscales = (0..ds.dim())
        .map(|d| {
            let mut diffs = Vec::with_capacity(sub.len() * sub.len().saturating_sub(1) / 2);
            for (a, &i) in sub.iter().enumerate() {
                for &j in &sub[..a] {
                    diffs.push((e[(i, d)] - e[(j, d)]).abs());
                }
            }
            let m = median(diffs);
            if m > 0.0 && m.is_finite() {
                m.ln()
            } else {
                0.0
            }
        })
        .collect();
    KernelParams {
        log_output_var: 0.0,
        log_lengthscales,
        log_noise_var: 0.01f64.ln(),
    }
}

fn project(theta: &mut [f64]) {
    let last = theta.len() - 1;
    for v in theta.iter_mut() {
        *v = v.clamp(-LOG_PARAM_BOUND, LOG_PARAM_BOUND);
    }
    theta[last] = theta[last].max(MIN_NOISE_VAR.ln());
}

/// Type-II maximum likelihood by mini-batch Adam on the mean per-observation
/// negative log-likelihood, in log-parameter space.
///
/// Each epoch visits the observations in a fresh seeded shuffle, in chunks of
/// `batch_size`; `steps` counts chunks. The returned trace holds the
/// full-data NLL at the start, after every epoch that completes before the
/// step budget runs out, and at the end.
pub fn fit(
    ds: &EmbeddingDataset,
    sets: &ConditioningSets,
    init: &KernelParams,
    opt: &OptimizerConfig,
) -> Result<FitResult, VecchiaError> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    check_dim(ds, init)?;
    check_sets(ds, sets)?;
    let n = ds.n();
    let initial = vecchia_nll(ds, sets, init, None)?;
    if !initial.is_finite() {
        return Err(VecchiaError::Diverged { step: 0, loss: initial });
    }
    let mut trace = vec![initial];
    if opt.steps == 0 || n == 0 {
        return Ok(FitResult {
            params: init.clone(),
            loss_trace: trace,
        });
    }

    let batch = opt.batch_size.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = init.to_vec();
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    let mut step = 0;
    'outer: loop {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let p = KernelParams::from_slice(&theta);
            let (loss, grad) = vecchia_nll_grad(ds, sets, &p, Some(chunk))?;
            step += 1;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(VecchiaError::Diverged { step, loss });
            }
            let scale = 1.0 / chunk.len() as f64;
            let b1 = 1.0 - BETA1.powi(step as i32);
            let b2 = 1.0 - BETA2.powi(step as i32);
            for k in 0..theta.len() {
                let gk = grad[k] * scale;
                m1[k] = BETA1 * m1[k] + (1.0 - BETA1) * gk;
                m2[k] = BETA2 * m2[k] + (1.0 - BETA2) * gk * gk;
                theta[k] -= opt.learning_rate * (m1[k] / b1) / ((m2[k] / b2).sqrt() + EPS);
            }
            project(&mut theta);
            if step >= opt.steps {
                break 'outer;
            }
        }
        let full = vecchia_nll(ds, sets, &KernelParams::from_slice(&theta), None)?;
        if !full.is_finite() {
            return Err(VecchiaError::Diverged { step, loss: full });
        }
        trace.push(full);
    }
    let params = KernelParams::from_slice(&theta);
    let full = vecchia_nll(ds, sets, &params, None)?;
    if !full.is_finite() {
        return Err(VecchiaError::Diverged { step, loss: full });
    }
    trace.push(full);
    Ok(FitResult {
        params,
        loss_trace: trace,
    })
}

/// Predictive moments for each query row given its conditioning set of
/// training indices.
pub fn predict(
    ds: &EmbeddingDataset,
    p: &KernelParams,
    queries: &Matrix,
    query_sets: &[Vec<usize>],
) -> Result<Vec<GaussianPrediction>, VecchiaError> {
    check_dim(ds, p)?;
    if queries.cols() != p.dim() {
        return Err(KernelError::Dimension {
            expected: p.dim(),
            found: queries.cols(),
        }
        .into());
    }
    if query_sets.len() != queries.rows() {
        return Err(VecchiaError::SetCount {
            sets: query_sets.len(),
            expected: queries.rows(),
        });
    }
    query_sets.iter().try_for_each(|g| check_indices(g, ds.n()))?;
    let pr = Prepared::new(p);
    (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let (mean, var_latent) = moments(ds.embeddings(), ds.responses(), &query_sets[q], queries.row(q), &pr, q)?;
            Ok(GaussianPrediction {
                mean,
                var_latent,
                var_observation: var_latent + pr.noise_var,
            })
        })
        .collect()
}

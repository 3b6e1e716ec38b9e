//! Block predictors.
//!
//! The best linear unbiased block predictor combines the per-block
//! conditional means with weights minimizing
//! `w' Lambda w - 2 lambda' w + 1` subject to `1'w = 1`. Working with
//! `Lambda`/`lambda` instead of the conditional covariance avoids inverting a
//! matrix that becomes singular as the target approaches a design point.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::conditional::{target_moments, BlockCache, TargetMoments};
use crate::error::{GpError, Result};
use crate::kernel::jitter_for;
use crate::linalg::cholesky_jittered;
use crate::model::GpParams;
use crate::par;

/// Relative distance under which a target is treated as a design point.
pub const EXACT_HIT_TOL: f64 = 1e-12;

/// Predictive mean and variance at one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionResult {
    pub mean: f64,
    /// Clamped at zero.
    pub variance: f64,
    /// Variance before clamping.
    pub variance_raw: f64,
    /// Block weights (absent for the BLUP).
    pub weights: Option<Vec<f64>>,
    /// Per-block conditional means (absent for the BLUP).
    pub block_means: Option<Vec<f64>>,
    /// Set when a degenerate case short-circuited the weight computation.
    pub fallback: bool,
}

impl PredictionResult {
    pub fn new(mean: f64, variance_raw: f64, weights: Option<Vec<f64>>, block_means: Option<Vec<f64>>) -> Self {
        if variance_raw < 0.0 {
            log::debug!("clamping predictive variance {variance_raw:e} to zero");
        }
        Self { mean, variance: variance_raw.max(0.0), variance_raw, weights, block_means, fallback: false }
    }

    pub(crate) fn observed(y: f64, weights: Option<Vec<f64>>) -> Self {
        Self { mean: y, variance: 0.0, variance_raw: 0.0, weights, block_means: None, fallback: true }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Index of the first row coinciding with `x` (relative distance below
/// [`EXACT_HIT_TOL`]).
pub(crate) fn exact_hit<'a>(x: &[f64], rows: impl Iterator<Item = &'a Vec<f64>>) -> Option<usize> {
    let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let tol2 = (EXACT_HIT_TOL * scale).powi(2);
    rows.enumerate()
        .find(|(_, r)| r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= tol2)
        .map(|(i, _)| i)
}

fn hit_in_cache(cache: &BlockCache, x: &[f64]) -> Option<(usize, usize)> {
    cache
        .blocks()
        .iter()
        .enumerate()
        .find_map(|(b, blk)| exact_hit(x, blk.rows.iter()).map(|s| (b, s)))
}

/// Quadratic-program data for the block weights at one target.
#[derive(Debug, Clone)]
pub struct LambdaSystem {
    pub big_lambda: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl LambdaSystem {
    /// `w' Lambda w - 2 lambda' w + 1`: unit-variance prediction error of
    /// the block combination `w`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.big_lambda * w)) - 2.0 * self.lambda.dot(w) + 1.0
    }
}

impl From<&TargetMoments> for LambdaSystem {
    fn from(tm: &TargetMoments) -> Self {
        Self { big_lambda: tm.big_lambda.clone(), lambda: tm.lambda.clone() }
    }
}

pub fn lambda_system(cache: &BlockCache, xstar: &[f64]) -> Result<LambdaSystem> {
    if xstar.len() != cache.p() {
        return Err(GpError::DimensionMismatch { expected: cache.p(), got: xstar.len() });
    }
    let all: Vec<usize> = (0..cache.k()).collect();
    let tm = target_moments(cache, &all, &[xstar.to_vec()]);
    Ok(LambdaSystem::from(&tm[0]))
}

/// Optimal weights
/// `w = ((1 - 1'L^-1 l) / 1'L^-1 1) L^-1 1 + L^-1 l` and the unit-variance
/// prediction error they achieve.
pub fn blubp_weights(sys: &LambdaSystem) -> Result<(DVector<f64>, f64)> {
    let k = sys.lambda.len();
    if k == 0 || sys.big_lambda.shape() != (k, k) {
        return Err(GpError::InvalidArgument("malformed lambda system".into()));
    }
    let chol = cholesky_jittered(sys.big_lambda.clone(), jitter_for(k), "block weight system")?;
    let ones = DVector::from_element(k, 1.0);
    let inv_one = chol.solve(&ones);
    let inv_lam = chol.solve(&sys.lambda);
    let s = inv_one.sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(GpError::Numerical(format!("1'Lambda^-1 1 = {s} is not positive")));
    }
    let w = &inv_one * ((1.0 - inv_lam.sum()) / s) + inv_lam;
    let total = w.sum();
    let w = w / total;
    let var = sys.objective(&w);
    Ok((w, var))
}

/// The closed-form variance display
/// `1 + (1 - 1'L^-1 l)^2 / 1'L^-1 1 - l' L^-1 l`.
pub fn blubp_variance_closed_form(sys: &LambdaSystem) -> Result<f64> {
    let k = sys.lambda.len();
    let chol = cholesky_jittered(sys.big_lambda.clone(), jitter_for(k), "block weight system")?;
    let inv_one = chol.solve(&DVector::from_element(k, 1.0));
    let inv_lam = chol.solve(&sys.lambda);
    Ok(1.0 + (1.0 - inv_lam.sum()).powi(2) / inv_one.sum() - sys.lambda.dot(&inv_lam))
}

/// Positive-definiteness certificate for `Lambda` (no jitter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdCertificate {
    pub min_eigenvalue: f64,
    pub cholesky_ok: bool,
}

pub fn check_lambda_pd(sys: &LambdaSystem) -> PdCertificate {
    let min_eigenvalue = sys.big_lambda.clone().symmetric_eigenvalues().min();
    PdCertificate { min_eigenvalue, cholesky_ok: sys.big_lambda.clone().cholesky().is_some() }
}

fn check_cache(params: &GpParams, cache: &BlockCache) -> Result<()> {
    if &params.phi != cache.phi() {
        return Err(GpError::InvalidArgument("cache was built for a different roughness".into()));
    }
    if params.beta.len() != cache.q() {
        return Err(GpError::DimensionMismatch { expected: cache.q(), got: params.beta.len() });
    }
    Ok(())
}

fn blubp_from_moments(params: &GpParams, tm: &TargetMoments) -> Result<PredictionResult> {
    let beta = params.beta_vec();
    let trend = tm.fx.dot(&beta);
    let means = tm.cond_means(&beta);
    let (w, var) = blubp_weights(&LambdaSystem::from(tm))?;
    let mean = trend + w.iter().zip(means.iter()).map(|(wi, mi)| wi * (mi - trend)).sum::<f64>();
    Ok(PredictionResult::new(mean, params.sigma2 * var, Some(w.iter().copied().collect()), Some(means.iter().copied().collect())))
}

/// Prior weights for the composite-likelihood predictor.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PriorWeights {
    #[default]
    Equal,
    Given(Vec<f64>),
}

impl PriorWeights {
    fn resolve(&self, k: usize) -> Result<DVector<f64>> {
        match self {
            PriorWeights::Equal => Ok(DVector::from_element(k, 1.0 / k as f64)),
            PriorWeights::Given(w) => {
                if w.len() != k {
                    return Err(GpError::DimensionMismatch { expected: k, got: w.len() });
                }
                if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                    return Err(GpError::InvalidArgument("prior weights must be nonnegative and sum to one".into()));
                }
                Ok(DVector::from_column_slice(w))
            }
        }
    }
}

/// Threshold on `lambda_i` beyond which the target is inside block `i`.
const INSIDE_BLOCK: f64 = 1.0 - 1e-12;

fn cl_from_moments(params: &GpParams, tm: &TargetMoments, prior: &DVector<f64>) -> Result<PredictionResult> {
    let beta = params.beta_vec();
    let trend = tm.fx.dot(&beta);
    let means = tm.cond_means(&beta);
    let k = means.len();
    if let Some(i) = (0..k).find(|&i| tm.lambda[i] >= INSIDE_BLOCK) {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        let mut res = PredictionResult::new(means[i], params.sigma2 * (1.0 - tm.lambda[i]), Some(w), Some(means.iter().copied().collect()));
        res.fallback = true;
        return Ok(res);
    }
    let raw = DVector::from_fn(k, |i, _| prior[i] / (1.0 - tm.lambda[i]));
    let total = raw.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(GpError::Numerical("composite-likelihood weights do not normalize".into()));
    }
    let w = raw / total;
    let mean = trend + w.iter().zip(means.iter()).map(|(wi, mi)| wi * (mi - trend)).sum::<f64>();
    let var = LambdaSystem::from(tm).objective(&w);
    Ok(PredictionResult::new(mean, params.sigma2 * var, Some(w.iter().copied().collect()), Some(means.iter().copied().collect())))
}

fn observed_with_weight(cache: &BlockCache, b: usize, s: usize) -> PredictionResult {
    let mut w = vec![0.0; cache.k()];
    w[b] = 1.0;
    PredictionResult::observed(cache.block(b).y[s], Some(w))
}

/// Best linear unbiased block predictor at `xstar`.
pub fn predict_blubp(params: &GpParams, cache: &BlockCache, xstar: &[f64]) -> Result<PredictionResult> {
    Ok(predict_many(params, cache, &[xstar.to_vec()], Predictor::Blubp)?.remove(0))
}

/// Composite-likelihood predictor with the given prior block weights.
pub fn predict_cl(params: &GpParams, cache: &BlockCache, xstar: &[f64], prior: &PriorWeights) -> Result<PredictionResult> {
    Ok(predict_many(params, cache, &[xstar.to_vec()], Predictor::CompositeLikelihood(prior.clone()))?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Blubp,
    CompositeLikelihood(PriorWeights),
}

/// Targets per batched moment computation.
const BATCH: usize = 256;

/// Predictions at many targets, batched and parallel over batches; output is
/// in target order.
pub fn predict_many(params: &GpParams, cache: &BlockCache, targets: &[Vec<f64>], kind: Predictor) -> Result<Vec<PredictionResult>> {
    check_cache(params, cache)?;
    if let Some(bad) = targets.iter().find(|t| t.len() != cache.p()) {
        return Err(GpError::DimensionMismatch { expected: cache.p(), got: bad.len() });
    }
    let prior = match &kind {
        Predictor::CompositeLikelihood(p) => Some(p.resolve(cache.k())?),
        Predictor::Blubp => None,
    };
    let all: Vec<usize> = (0..cache.k()).collect();
    let chunks: Vec<&[Vec<f64>]> = targets.chunks(BATCH).collect();
    let out = par::map_slice(&chunks, |chunk| -> Result<Vec<PredictionResult>> {
        let hits: Vec<Option<(usize, usize)>> = chunk.iter().map(|x| hit_in_cache(cache, x)).collect();
        let need: Vec<Vec<f64>> = chunk.iter().zip(&hits).filter(|(_, h)| h.is_none()).map(|(x, _)| x.clone()).collect();
        let mut moments = target_moments(cache, &all, &need).into_iter();
        hits.iter()
            .map(|h| match h {
                Some((b, s)) => Ok(observed_with_weight(cache, *b, *s)),
                None => {
                    let tm = moments.next().expect("one moment per non-hit target");
                    match &prior {
                        None => blubp_from_moments(params, &tm),
                        Some(p) => cl_from_moments(params, &tm, p),
                    }
                }
            })
            .collect()
    });
    let mut results = Vec::with_capacity(targets.len());
    for r in out {
        results.extend(r?);
    }
    Ok(results)
}

//! Composite likelihoods over a block partition.
//!
//! Every likelihood here is a sum of Gaussian quadratic-form terms, each
//! described by a [`ComponentTerm`]. Profiling `beta` and `sigma^2` out of
//! any such sum is the same computation, so the proposed likelihood (CI), the
//! block marginal (CML) and block conditional (CCL) baselines, and the full
//! likelihood (one term) share [`profile_estimates`] and
//! [`concentrated_objective`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clock::Stopwatch;
use crate::conditional::{build_cache, optimal_weights, target_moments, BlockCache};
use crate::design::Partition;
use crate::error::{GpError, Result};
use crate::kernel::{self_corr, BasisSpec, RoughnessParams};
use crate::linalg::{cholesky_jittered, logdet, whiten_mat, whiten_vec, Chol};
use crate::model::{Dataset, GpParams};
use crate::optim::{multi_start_traced, FitOptions, TracePoint};
use crate::par;

/// Floor applied to the profiled process variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Full likelihood.
    ML,
    /// Proposed block composite likelihood.
    CI,
    /// Block composite marginal likelihood.
    CML,
    /// Block composite conditional likelihood.
    CCL,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ML, Method::CI, Method::CML, Method::CCL];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ML => "ML",
            Method::CI => "CI",
            Method::CML => "CML",
            Method::CCL => "CCL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ML" => Ok(Method::ML),
            "CI" => Ok(Method::CI),
            "CML" => Ok(Method::CML),
            "CCL" => Ok(Method::CCL),
            other => Err(GpError::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Weight matrix `Q` of a term.
#[derive(Debug, Clone)]
pub enum TermWeight {
    /// `Q = S^-1` for the factored covariance `S`.
    Inverse(Arc<Chol>),
    /// `Q = scale * w w'`.
    RankOne { scale: f64, w: DVector<f64> },
}

/// One Gaussian contribution
/// `-1/2 (d log s2 + logdet_part + (U - G b)' Q (U - G b) / s2)`.
#[derive(Debug, Clone)]
pub struct ComponentTerm {
    pub upsilon: DVector<f64>,
    pub gamma: DMatrix<f64>,
    pub weight: TermWeight,
    pub d: usize,
    pub logdet_part: f64,
}

impl ComponentTerm {
    /// Dense `Q`.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        match &self.weight {
            TermWeight::Inverse(c) => c.inverse(),
            TermWeight::RankOne { scale, w } => w * w.transpose() * *scale,
        }
    }

    /// `(U'QU, G'QU, G'QG)`.
    fn quadratic_parts(&self) -> (f64, DVector<f64>, DMatrix<f64>) {
        match &self.weight {
            TermWeight::Inverse(c) => {
                let zu = whiten_vec(c, &self.upsilon);
                let zg = whiten_mat(c, &self.gamma);
                (zu.norm_squared(), zg.tr_mul(&zu), zg.tr_mul(&zg))
            }
            TermWeight::RankOne { scale, w } => {
                let e = w.dot(&self.upsilon);
                let g = self.gamma.tr_mul(w);
                (scale * e * e, &g * (scale * e), &g * g.transpose() * *scale)
            }
        }
    }

    /// Log-likelihood contribution at `(beta, sigma2)`, without the `2 pi` constant.
    pub fn loglik(&self, beta: &DVector<f64>, sigma2: f64) -> f64 {
        let r = &self.upsilon - &self.gamma * beta;
        let quad = match &self.weight {
            TermWeight::Inverse(c) => whiten_vec(c, &r).norm_squared(),
            TermWeight::RankOne { scale, w } => scale * w.dot(&r).powi(2),
        };
        -0.5 * (self.d as f64 * sigma2.ln() + self.logdet_part + quad / sigma2)
    }
}

/// `1/n`-scaled sums of `G'QG`, `G'QU`, `U'QU`.
#[derive(Debug, Clone)]
pub struct ChiAccumulators {
    pub chi_gg: DMatrix<f64>,
    pub chi_gu: DVector<f64>,
    pub chi_uu: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct ProfileEstimates {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    /// `sigma2` before flooring.
    pub sigma2_raw: f64,
    pub chi: ChiAccumulators,
}

/// Closed-form `beta` and `sigma^2` maximizing a term sum at fixed roughness.
/// Accumulation runs in term order so results are bitwise reproducible.
pub fn profile_estimates(terms: &[ComponentTerm]) -> Result<ProfileEstimates> {
    let first = terms.first().ok_or_else(|| GpError::InvalidArgument("no likelihood terms".into()))?;
    let q = first.gamma.ncols();
    let parts = par::map_slice(terms, ComponentTerm::quadratic_parts);
    let mut uu = 0.0;
    let mut gu = DVector::zeros(q);
    let mut gg = DMatrix::zeros(q, q);
    let mut n = 0usize;
    for (t, (a, b, c)) in terms.iter().zip(parts) {
        uu += a;
        gu += b;
        gg += c;
        n += t.d;
    }
    if n < q + 1 {
        return Err(GpError::Identifiability(format!("{n} observations cannot identify {q} trend coefficients and a variance")));
    }
    let nf = n as f64;
    let chi = ChiAccumulators { chi_gg: gg / nf, chi_gu: gu / nf, chi_uu: uu / nf, n };
    let chol = chi
        .chi_gg
        .clone()
        .cholesky()
        .ok_or_else(|| GpError::Identifiability("trend Gram matrix is singular".into()))?;
    let beta = chol.solve(&chi.chi_gu);
    let sigma2_raw = chi.chi_uu + beta.dot(&(&chi.chi_gg * &beta)) - 2.0 * beta.dot(&chi.chi_gu);
    Ok(ProfileEstimates { beta, sigma2: sigma2_raw.max(SIGMA2_FLOOR), sigma2_raw, chi })
}

/// `n log sigma2_hat + sum logdet_part`; lower is better.
pub fn concentrated_objective(terms: &[ComponentTerm], profile: &ProfileEstimates) -> f64 {
    profile.chi.n as f64 * profile.sigma2.ln() + terms.iter().map(|t| t.logdet_part).sum::<f64>()
}

/// Marginal term of block `i`.
fn marginal_term(cache: &BlockCache, i: usize) -> ComponentTerm {
    let b = cache.block(i);
    ComponentTerm {
        upsilon: b.y.clone(),
        gamma: b.f.clone(),
        weight: TermWeight::Inverse(b.chol.clone()),
        d: b.len(),
        logdet_part: b.logdet,
    }
}

/// Term for `y(X_j) | y(X_i)`.
fn conditional_term(cache: &BlockCache, given: usize, target: usize) -> Result<ComponentTerm> {
    let (bi, bj) = (cache.block(given), cache.block(target));
    let kji = cache.cross(target, given);
    let upsilon = &bj.y - &kji * &bi.alpha;
    let gamma = &bj.f - &kji * &bi.kinv_f;
    // Schur complement K_j - K_ji K_i^-1 K_ij, with the nugget already inside K_j
    let half = whiten_mat(&bi.chol, &kji.transpose());
    let mut schur = self_corr(cache.kernel(), &bj.rows);
    for d in 0..bj.len() {
        schur[(d, d)] += cache.jitter();
    }
    schur -= half.transpose() * &half;
    let schur = (&schur + schur.transpose()) * 0.5;
    let chol = match cholesky_jittered(schur.clone(), 0.0, "") {
        Ok(c) => c,
        Err(_) => cholesky_jittered(schur, cache.jitter(), format!("conditional block {target}|{given}"))?,
    };
    let logdet_part = logdet(&chol);
    Ok(ComponentTerm { upsilon, gamma, weight: TermWeight::Inverse(Arc::new(chol)), d: bj.len(), logdet_part })
}

/// Terms of the proposed likelihood: block 1 marginally, block 2 given block
/// 1, then every point of block `r >= 3` through the minimum-variance
/// combination of its conditionals on blocks `1..r-1`.
pub fn ci_components(cache: &BlockCache) -> Result<Vec<ComponentTerm>> {
    let k = cache.k();
    let mut terms = vec![marginal_term(cache, 0)];
    if k >= 2 {
        terms.push(conditional_term(cache, 0, 1)?);
    }
    let later: Vec<usize> = (2..k).collect();
    let per_block = par::map_slice(&later, |&r| -> Result<Vec<ComponentTerm>> {
        let prev: Vec<usize> = (0..r).collect();
        let blk = cache.block(r);
        let moments = target_moments(cache, &prev, &blk.rows);
        moments
            .iter()
            .enumerate()
            .map(|(s, tm)| {
                let (w, varmin) = optimal_weights(&tm.cov_matrix()).map_err(|e| {
                    GpError::Numerical(format!("optimal weights for point {s} of block {r}: {e}"))
                })?;
                let upsilon = tm.kiy.map(|v| blk.y[s] - v);
                let mut gamma = tm.kif.clone() * -1.0;
                for mut row in gamma.row_iter_mut() {
                    row += blk.f.row(s);
                }
                Ok(ComponentTerm {
                    upsilon,
                    gamma,
                    weight: TermWeight::RankOne { scale: 1.0 / varmin, w },
                    d: 1,
                    logdet_part: varmin.ln(),
                })
            })
            .collect()
    });
    for block_terms in per_block {
        terms.extend(block_terms?);
    }
    Ok(terms)
}

/// One marginal term per block.
pub fn cml_components(cache: &BlockCache) -> Vec<ComponentTerm> {
    (0..cache.k()).map(|i| marginal_term(cache, i)).collect()
}

/// One conditional term per ordered pair `(j | i)`, `j != i`. A single block
/// degenerates to its marginal term.
pub fn ccl_components(cache: &BlockCache) -> Result<Vec<ComponentTerm>> {
    let k = cache.k();
    if k == 1 {
        return Ok(cml_components(cache));
    }
    let pairs: Vec<(usize, usize)> =
        (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    par::map_slice(&pairs, |&(i, j)| conditional_term(cache, i, j)).into_iter().collect()
}

pub fn components(cache: &BlockCache, method: Method) -> Result<Vec<ComponentTerm>> {
    match method {
        Method::ML => {
            if cache.k() != 1 {
                return Err(GpError::InvalidArgument("full likelihood needs a single block".into()));
            }
            Ok(cml_components(cache))
        }
        Method::CI => ci_components(cache),
        Method::CML => Ok(cml_components(cache)),
        Method::CCL => ccl_components(cache),
    }
}

/// Profiled objective of `method` at roughness `phi`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub profile: ProfileEstimates,
    pub terms: Vec<ComponentTerm>,
}

pub fn evaluate(ds: &Dataset, partition: &Partition, method: Method, basis: &BasisSpec, phi: &RoughnessParams) -> Result<Evaluation> {
    let cache = build_cache(ds, partition, phi, basis)?;
    let terms = components(&cache, method)?;
    let profile = profile_estimates(&terms)?;
    let objective = concentrated_objective(&terms, &profile);
    Ok(Evaluation { objective, profile, terms })
}

/// A fitted model and how it was obtained.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: GpParams,
    pub basis: BasisSpec,
    pub method: Method,
    pub partition: Option<Partition>,
    pub objective: f64,
    pub wall_time_s: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Minimizes the concentrated objective of `method` over log-roughness.
pub fn fit_composite(ds: &Dataset, partition: &Partition, method: Method, basis: &BasisSpec, opts: &FitOptions) -> Result<FittedModel> {
    fit_composite_traced(ds, partition, method, basis, opts).map(|(m, _)| m)
}

/// [`fit_composite`] plus every objective evaluation the optimizer made.
pub fn fit_composite_traced(
    ds: &Dataset,
    partition: &Partition,
    method: Method,
    basis: &BasisSpec,
    opts: &FitOptions,
) -> Result<(FittedModel, Vec<TracePoint>)> {
    if method == Method::ML {
        return crate::full::fit_mle_traced(ds, basis, opts);
    }
    fit_with(ds, partition, method, basis, opts, Some(partition.clone()))
}

pub(crate) fn fit_with(
    ds: &Dataset,
    partition: &Partition,
    method: Method,
    basis: &BasisSpec,
    opts: &FitOptions,
    record: Option<Partition>,
) -> Result<(FittedModel, Vec<TracePoint>)> {
    let started = Stopwatch::start();
    let objective = |log_phi: &[f64]| -> f64 {
        RoughnessParams::from_log(log_phi)
            .and_then(|phi| evaluate(ds, partition, method, basis, &phi))
            .map_or(f64::INFINITY, |e| e.objective)
    };
    let (best, trace) = multi_start_traced(&objective, ds.p(), opts);
    if !best.value.is_finite() {
        return Err(GpError::Numerical(format!("{method} objective was not finite at any evaluated roughness")));
    }
    if !best.converged {
        log::warn!("{method} fit stopped after {} evaluations without converging", best.evals);
    }
    let phi = RoughnessParams::from_log(&best.x)?;
    let eval = evaluate(ds, partition, method, basis, &phi)?;
    let params = GpParams::new(eval.profile.beta.iter().copied().collect(), eval.profile.sigma2, phi)?;
    let model = FittedModel {
        params,
        basis: basis.clone(),
        method,
        partition: record,
        objective: eval.objective,
        wall_time_s: started.seconds(),
        converged: best.converged,
        evaluations: best.evals,
    };
    Ok((model, trace))
}

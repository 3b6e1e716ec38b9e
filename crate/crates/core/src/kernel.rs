//! Correlation functions, correlation-matrix assembly and trend bases.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Correlations below `exp(-46)` (about 1e-20) are returned as exactly zero.
/// Products of such values drift into the subnormal range, where arithmetic is
/// many times slower. Zeroing them moves an `n x n` matrix by at most
/// `n * 1e-20` in norm, far below the diagonal jitter.
pub const UNDERFLOW_EXPONENT: f64 = 46.0;

/// Diagonal regularization per observation: the nugget for a dataset of
/// `n_total` points is `JITTER_PER_POINT * n_total`.
pub const JITTER_PER_POINT: f64 = 1e-10;

/// Nugget added to the correlation of every observed point.
pub fn jitter_for(n_total: usize) -> f64 {
    JITTER_PER_POINT * n_total.max(1) as f64
}

/// Per-dimension roughness (inverse squared length-scale) of the
/// squared-exponential correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RoughnessParams(Vec<f64>);

impl RoughnessParams {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(GpError::InvalidArgument("roughness vector is empty".into()));
        }
        if let Some(bad) = phi.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(GpError::InvalidArgument(format!(
                "roughness entries must be positive and finite, got {bad}"
            )));
        }
        Ok(Self(phi))
    }

    /// Same roughness in every one of `p` dimensions.
    pub fn isotropic(value: f64, p: usize) -> Result<Self> {
        Self::new(vec![value; p])
    }

    pub fn from_log(log_phi: &[f64]) -> Result<Self> {
        Self::new(log_phi.iter().map(|v| v.exp()).collect())
    }

    pub fn to_log(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.ln()).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RoughnessParams {
    type Error = GpError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RoughnessParams> for Vec<f64> {
    fn from(p: RoughnessParams) -> Self {
        p.0
    }
}

/// A stationary correlation function. Only [`SquaredExponential`] ships.
pub trait Correlation: Sync {
    fn dim(&self) -> usize;
    fn corr(&self, x: &[f64], x2: &[f64]) -> f64;
}

/// `exp(-(x - x2)' diag(phi) (x - x2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredExponential {
    pub phi: RoughnessParams,
}

impl SquaredExponential {
    pub fn new(phi: RoughnessParams) -> Self {
        Self { phi }
    }
}

impl Correlation for SquaredExponential {
    fn dim(&self) -> usize {
        self.phi.dim()
    }

    #[inline]
    fn corr(&self, x: &[f64], x2: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((a, b), w) in x.iter().zip(x2).zip(self.phi.as_slice()) {
            let d = a - b;
            acc += w * d * d;
        }
        if acc > UNDERFLOW_EXPONENT {
            0.0
        } else {
            (-acc).exp()
        }
    }
}

/// Checked scalar squared-exponential correlation.
pub fn sq_exp_corr(x: &[f64], x2: &[f64], phi: &RoughnessParams) -> Result<f64> {
    if x.len() != phi.dim() {
        return Err(GpError::DimensionMismatch { expected: phi.dim(), got: x.len() });
    }
    if x2.len() != phi.dim() {
        return Err(GpError::DimensionMismatch { expected: phi.dim(), got: x2.len() });
    }
    Ok(SquaredExponential::new(phi.clone()).corr(x, x2))
}

/// Rows of `x` as owned contiguous vectors (points are stored one per row).
pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// Cross-correlation between the rows of `x` and the rows of `x2`.
pub fn corr_matrix(x: &DMatrix<f64>, x2: &DMatrix<f64>, phi: &RoughnessParams) -> Result<DMatrix<f64>> {
    for m in [x, x2] {
        if m.ncols() != phi.dim() {
            return Err(GpError::DimensionMismatch { expected: phi.dim(), got: m.ncols() });
        }
    }
    let kern = SquaredExponential::new(phi.clone());
    Ok(cross_corr(&kern, &rows_of(x), &rows_of(x2)))
}

/// Symmetric correlation of a point set with itself: each unordered pair is
/// evaluated once and the diagonal is exactly one.
pub fn corr_matrix_sym(x: &DMatrix<f64>, phi: &RoughnessParams) -> Result<DMatrix<f64>> {
    if x.ncols() != phi.dim() {
        return Err(GpError::DimensionMismatch { expected: phi.dim(), got: x.ncols() });
    }
    let kern = SquaredExponential::new(phi.clone());
    Ok(self_corr(&kern, &rows_of(x)))
}

pub(crate) fn cross_corr<K: Correlation>(kern: &K, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kern.corr(&a[i], &b[j]))
}

pub(crate) fn self_corr<K: Correlation>(kern: &K, a: &[Vec<f64>]) -> DMatrix<f64> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = 1.0;
        for i in (j + 1)..n {
            let v = kern.corr(&a[i], &a[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// A named scalar function of an input point, used as a trend regressor.
#[derive(Clone)]
pub struct BasisFn {
    pub name: String,
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl BasisFn {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

impl fmt::Debug for BasisFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("BasisFn").field(&self.name).finish()
    }
}

/// Trend regressors `f(x)`.
#[derive(Debug, Clone, Default)]
pub enum BasisSpec {
    /// `f(x) = 1`.
    #[default]
    Constant,
    /// `f(x) = (1, x_1, ..., x_p)`.
    Linear,
    Custom(Vec<BasisFn>),
}

impl BasisSpec {
    pub fn custom(fns: Vec<BasisFn>) -> Result<Self> {
        if fns.is_empty() {
            return Err(GpError::InvalidArgument("custom basis needs at least one function".into()));
        }
        Ok(BasisSpec::Custom(fns))
    }

    /// Basis dimension for inputs of dimension `p`.
    pub fn q(&self, p: usize) -> usize {
        match self {
            BasisSpec::Constant => 1,
            BasisSpec::Linear => p + 1,
            BasisSpec::Custom(fns) => fns.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BasisSpec::Constant => "constant",
            BasisSpec::Linear => "linear",
            BasisSpec::Custom(_) => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "constant" => Ok(BasisSpec::Constant),
            "linear" => Ok(BasisSpec::Linear),
            other => Err(GpError::InvalidArgument(format!("unknown basis '{other}'"))),
        }
    }

    /// `f(x)` as a row.
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        match self {
            BasisSpec::Constant => DVector::from_element(1, 1.0),
            BasisSpec::Linear => {
                DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied()))
            }
            BasisSpec::Custom(fns) => DVector::from_iterator(fns.len(), fns.iter().map(|b| (b.f)(x))),
        }
    }
}

/// `F = f(X)'`, one row per point.
pub fn basis_matrix(x: &DMatrix<f64>, spec: &BasisSpec) -> DMatrix<f64> {
    let rows = rows_of(x);
    basis_rows(&rows, spec)
}

pub(crate) fn basis_rows(rows: &[Vec<f64>], spec: &BasisSpec) -> DMatrix<f64> {
    let p = rows.first().map_or(0, |r| r.len());
    let q = spec.q(p);
    let mut f = DMatrix::zeros(rows.len(), q);
    for (i, r) in rows.iter().enumerate() {
        f.row_mut(i).copy_from(&spec.eval(r).transpose());
    }
    f
}

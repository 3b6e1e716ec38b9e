//! Datasets and model parameters.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernel::{rows_of, RoughnessParams};

/// Inputs (one point per row), responses and optional slice labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Zero-based slice label per row, when the inputs came from a sliced design.
    pub slices: Option<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, rejecting repeated input points.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, slices: Option<Vec<usize>>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::DimensionMismatch { expected: x.nrows(), got: y.len() });
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(GpError::InvalidArgument("dataset must have at least one point and one dimension".into()));
        }
        if let Some(s) = &slices {
            if s.len() != x.nrows() {
                return Err(GpError::DimensionMismatch { expected: x.nrows(), got: s.len() });
            }
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(GpError::InvalidArgument("dataset contains non-finite values".into()));
        }
        if let Some((a, b)) = find_duplicate_row(&x) {
            return Err(GpError::InvalidArgument(format!("input rows {a} and {b} coincide")));
        }
        Ok(Self { x, y, slices })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Sub-dataset with the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.p(), |i, d| self.x[(idx[i], d)]);
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        let slices = self.slices.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect());
        Dataset { x, y, slices }
    }
}

fn find_duplicate_row(x: &DMatrix<f64>) -> Option<(usize, usize)> {
    let rows = rows_of(x);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let cmp = |a: &Vec<f64>, b: &Vec<f64>| {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.partial_cmp(v).unwrap_or(Ordering::Equal))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    };
    order.sort_by(|&a, &b| cmp(&rows[a], &rows[b]));
    order
        .windows(2)
        .find(|w| rows[w[0]] == rows[w[1]])
        .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
}

/// Trend coefficients, process variance and roughness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub phi: RoughnessParams,
}

impl GpParams {
    pub fn new(beta: Vec<f64>, sigma2: f64, phi: RoughnessParams) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(GpError::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(GpError::InvalidArgument("beta must be finite".into()));
        }
        Ok(Self { beta, sigma2, phi })
    }

    pub fn beta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }
}

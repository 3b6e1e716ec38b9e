//! Exact dense baseline: full likelihood, MLE, BLUP and sampling.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::composite::{fit_with, FittedModel, Method};
use crate::design::Partition;
use crate::error::{GpError, Result};
use crate::kernel::{basis_rows, cross_corr, jitter_for, rows_of, self_corr, BasisSpec, SquaredExponential};
use crate::linalg::{cholesky_jittered, logdet, whiten_vec, Chol};
use crate::model::{Dataset, GpParams};
use crate::optim::{FitOptions, TracePoint};
use crate::predict::{exact_hit, PredictionResult};
use crate::rng::{rng_from_seed, GpRng};

fn check_params(p: usize, params: &GpParams, basis: &BasisSpec) -> Result<()> {
    if params.phi.dim() != p {
        return Err(GpError::DimensionMismatch { expected: p, got: params.phi.dim() });
    }
    if params.beta.len() != basis.q(p) {
        return Err(GpError::DimensionMismatch { expected: basis.q(p), got: params.beta.len() });
    }
    Ok(())
}

fn full_factor(rows: &[Vec<f64>], params: &GpParams) -> Result<Chol> {
    let kern = SquaredExponential::new(params.phi.clone());
    cholesky_jittered(self_corr(&kern, rows), jitter_for(rows.len()), "full correlation matrix")
}

/// `-1/2 (n log s2 + log|R| + (y - F b)' R^-1 (y - F b) / s2)`.
pub fn full_loglik(ds: &Dataset, params: &GpParams, basis: &BasisSpec) -> Result<f64> {
    check_params(ds.p(), params, basis)?;
    let rows = rows_of(&ds.x);
    let chol = full_factor(&rows, params)?;
    let resid = &ds.y - basis_rows(&rows, basis) * params.beta_vec();
    let quad = whiten_vec(&chol, &resid).norm_squared();
    let n = ds.n() as f64;
    Ok(-0.5 * (n * params.sigma2.ln() + logdet(&chol) + quad / params.sigma2))
}

/// Maximum likelihood over the profiled full likelihood.
pub fn fit_mle(ds: &Dataset, basis: &BasisSpec, opts: &FitOptions) -> Result<FittedModel> {
    fit_mle_traced(ds, basis, opts).map(|(m, _)| m)
}

pub fn fit_mle_traced(ds: &Dataset, basis: &BasisSpec, opts: &FitOptions) -> Result<(FittedModel, Vec<TracePoint>)> {
    if ds.n() > opts.dense_cap {
        return Err(GpError::InvalidArgument(format!(
            "{} points exceed the dense full-likelihood cap of {}",
            ds.n(),
            opts.dense_cap
        )));
    }
    let single = Partition::single(ds.n())?;
    fit_with(ds, &single, Method::ML, basis, opts, None)
}

/// Simple-kriging predictor on the full dataset.
#[derive(Debug)]
pub struct FullPredictor {
    kern: SquaredExponential,
    basis: BasisSpec,
    params: GpParams,
    rows: Vec<Vec<f64>>,
    y: DVector<f64>,
    chol: Chol,
    /// `R^-1 (y - F beta)`
    alpha: DVector<f64>,
}

impl FullPredictor {
    pub fn new(ds: &Dataset, params: &GpParams, basis: &BasisSpec) -> Result<Self> {
        check_params(ds.p(), params, basis)?;
        let rows = rows_of(&ds.x);
        let chol = full_factor(&rows, params)?;
        let resid = &ds.y - basis_rows(&rows, basis) * params.beta_vec();
        let alpha = chol.solve(&resid);
        Ok(Self {
            kern: SquaredExponential::new(params.phi.clone()),
            basis: basis.clone(),
            params: params.clone(),
            rows,
            y: ds.y.clone(),
            chol,
            alpha,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictionResult> {
        if x.len() != self.params.phi.dim() {
            return Err(GpError::DimensionMismatch { expected: self.params.phi.dim(), got: x.len() });
        }
        if let Some(i) = exact_hit(x, self.rows.iter()) {
            return Ok(PredictionResult::observed(self.y[i], None));
        }
        let a = cross_corr(&self.kern, &self.rows, &[x.to_vec()]).column(0).into_owned();
        let trend = self.basis.eval(x).dot(&self.params.beta_vec());
        let mean = trend + a.dot(&self.alpha);
        let raw = self.params.sigma2 * (1.0 - whiten_vec(&self.chol, &a).norm_squared());
        Ok(PredictionResult::new(mean, raw, None, None))
    }
}

/// BLUP at one point with the given parameters.
pub fn blup(ds: &Dataset, params: &GpParams, basis: &BasisSpec, xstar: &[f64]) -> Result<PredictionResult> {
    FullPredictor::new(ds, params, basis)?.predict(xstar)
}

/// `y = F beta + sigma L u` with `L L' = R + delta I`.
pub fn sample_gp(x: &DMatrix<f64>, params: &GpParams, basis: &BasisSpec, seed: u64) -> Result<DVector<f64>> {
    sample_gp_with(x, params, basis, &mut rng_from_seed(seed))
}

pub fn sample_gp_with(x: &DMatrix<f64>, params: &GpParams, basis: &BasisSpec, rng: &mut GpRng) -> Result<DVector<f64>> {
    check_params(x.ncols(), params, basis)?;
    let rows = rows_of(x);
    let chol = full_factor(&rows, params)?;
    let u = DVector::from_fn(rows.len(), |_, _| StandardNormal.sample(rng));
    Ok(basis_rows(&rows, basis) * params.beta_vec() + chol.l() * u * params.sigma2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RoughnessParams;

    fn phi1(v: f64) -> RoughnessParams {
        RoughnessParams::new(vec![v]).unwrap()
    }

    fn ds1(x: &[f64], y: &[f64]) -> Dataset {
        Dataset::new(DMatrix::from_column_slice(x.len(), 1, x), DVector::from_column_slice(y), None).unwrap()
    }

    #[test]
    fn one_point_cases() {
        let params = GpParams::new(vec![0.0], 1.0, phi1(1.0)).unwrap();
        // log(1 + delta) is the only surviving piece
        let v = full_loglik(&ds1(&[0.0], &[0.0]), &params, &BasisSpec::Constant).unwrap();
        assert!(v.abs() < 1e-9);
        let v = full_loglik(&ds1(&[0.0], &[2.0]), &params, &BasisSpec::Constant).unwrap();
        assert!((v + 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_closed_form() {
        let (y0, y1, beta, s2) = (0.7, -0.4, 0.1, 1.5);
        let params = GpParams::new(vec![beta], s2, phi1(1.0)).unwrap();
        let ds = ds1(&[0.0, 1.0], &[y0, y1]);
        let d = jitter_for(2);
        let (a, c) = (1.0 + d, (-1.0f64).exp());
        let det = a * a - c * c;
        let (r0, r1) = (y0 - beta, y1 - beta);
        let quad = (a * r0 * r0 - 2.0 * c * r0 * r1 + a * r1 * r1) / det;
        let expect = -0.5 * (2.0 * s2.ln() + det.ln() + quad / s2);
        assert!((full_loglik(&ds, &params, &BasisSpec::Constant).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn two_point_blup_closed_form() {
        let params = GpParams::new(vec![0.2], 2.0, phi1(0.8)).unwrap();
        let ds = ds1(&[0.0, 1.0], &[1.0, -0.5]);
        let xs: f64 = 0.3;
        let d = jitter_for(2);
        let (a, c) = (1.0 + d, (-0.8f64).exp());
        let det = a * a - c * c;
        let k0 = (-0.8 * xs * xs).exp();
        let k1 = (-0.8 * (1.0 - xs) * (1.0 - xs)).exp();
        // inverse [[a, -c], [-c, a]] / det
        let (r0, r1) = (0.8, -0.7);
        let mean = 0.2 + (k0 * (a * r0 - c * r1) + k1 * (-c * r0 + a * r1)) / det;
        let var = 2.0 * (1.0 - (k0 * (a * k0 - c * k1) + k1 * (-c * k0 + a * k1)) / det);
        let p = blup(&ds, &params, &BasisSpec::Constant, &[xs]).unwrap();
        assert!((p.mean - mean).abs() < 1e-12);
        assert!((p.variance - var).abs() < 1e-12);
    }

    #[test]
    fn blup_interpolates_and_decorrelates() {
        let params = GpParams::new(vec![0.5], 1.7, phi1(2.0)).unwrap();
        let ds = ds1(&[0.0, 0.4, 1.0, 1.9], &[0.3, 1.2, -0.8, 0.0]);
        let pred = FullPredictor::new(&ds, &params, &BasisSpec::Constant).unwrap();
        for i in 0..4 {
            let p = pred.predict(&[ds.x[(i, 0)]]).unwrap();
            assert!((p.mean - ds.y[i]).abs() < 1e-12);
            assert!(p.variance <= 1e-8 * 1.7);
        }
        let far = pred.predict(&[1e3]).unwrap();
        assert!((far.mean - 0.5).abs() < 1e-12);
        assert!((far.variance - 1.7).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic_and_degenerates() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 0.3, 0.9, 1.2, 2.0]);
        let params = GpParams::new(vec![1.5], 1.0, phi1(1.0)).unwrap();
        let a = sample_gp(&x, &params, &BasisSpec::Constant, 3).unwrap();
        assert_eq!(a, sample_gp(&x, &params, &BasisSpec::Constant, 3).unwrap());
        assert_ne!(a, sample_gp(&x, &params, &BasisSpec::Constant, 4).unwrap());
        let tiny = GpParams::new(vec![1.5], 1e-30, phi1(1.0)).unwrap();
        let b = sample_gp(&x, &tiny, &BasisSpec::Constant, 3).unwrap();
        assert!(b.iter().all(|v| (v - 1.5).abs() < 1e-10));
    }

    #[test]
    fn loglik_is_permutation_invariant() {
        let params = GpParams::new(vec![0.1, 0.3], 0.8, phi1(1.3)).unwrap();
        let ds = ds1(&[0.0, 0.5, 1.4, 2.2], &[0.1, 0.9, -0.3, 0.6]);
        let perm = ds.select(&[2, 0, 3, 1]);
        let a = full_loglik(&ds, &params, &BasisSpec::Linear).unwrap();
        let b = full_loglik(&perm, &params, &BasisSpec::Linear).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let ds = ds1(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]);
        let opts = FitOptions { dense_cap: 2, ..Default::default() };
        assert!(fit_mle(&ds, &BasisSpec::Constant, &opts).is_err());
    }
}

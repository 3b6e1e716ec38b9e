//! Per-block conditional moments.
//!
//! For a target point `x` and a block `i`, `eps_i = y(x) | y(X_i) = y_i` is
//! Gaussian, and the `eps_i` are jointly Gaussian across blocks. Everything
//! here is at unit process variance; callers multiply by `sigma^2`.
//!
//! The jitter is modelled as a nugget on observed points only, so the
//! covariance of `y(X_i)` is `K_i = K(X_i, X_i) + delta*I` and the diagonal
//! cross term `K(x,X_i) K_i^-1 K_i K_i^-1 K(X_i,x)` collapses to `lambda_i`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::design::Partition;
use crate::error::{GpError, Result};
use crate::kernel::{basis_rows, cross_corr, jitter_for, rows_of, self_corr, BasisSpec, RoughnessParams, SquaredExponential};
use crate::linalg::{cholesky_jittered, col_dots, logdet, lower_inverse, whiten_mat, whiten_vec, Chol};
use crate::model::Dataset;
use crate::par;

/// Factorization and solved systems for one block.
#[derive(Debug, Clone)]
pub struct Block {
    /// Dataset rows belonging to this block, in partition order.
    pub indices: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub y: DVector<f64>,
    pub f: DMatrix<f64>,
    pub chol: Arc<Chol>,
    /// Inverse of the lower Cholesky factor.
    pub l_inv: DMatrix<f64>,
    /// `L^-1 y`
    pub wy: DVector<f64>,
    /// `L^-1 F`
    pub wf: DMatrix<f64>,
    /// `K_i^-1 y_i`
    pub alpha: DVector<f64>,
    /// `K_i^-1 F_i`
    pub kinv_f: DMatrix<f64>,
    pub logdet: f64,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Immutable per-block factorizations at a fixed roughness.
#[derive(Debug)]
pub struct BlockCache {
    kern: SquaredExponential,
    basis: BasisSpec,
    jitter: f64,
    n_total: usize,
    blocks: Vec<Block>,
    whitened: OnceLock<Vec<DMatrix<f64>>>,
}

fn pair_index(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

pub fn build_cache(ds: &Dataset, partition: &Partition, phi: &RoughnessParams, basis: &BasisSpec) -> Result<BlockCache> {
    if partition.n() != ds.n() {
        return Err(GpError::DimensionMismatch { expected: ds.n(), got: partition.n() });
    }
    if phi.dim() != ds.p() {
        return Err(GpError::DimensionMismatch { expected: ds.p(), got: phi.dim() });
    }
    let kern = SquaredExponential::new(phi.clone());
    let jitter = jitter_for(ds.n());
    let all_rows = rows_of(&ds.x);
    let built = par::map_slice(partition.blocks(), |idx| -> Result<Block> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| all_rows[i].clone()).collect();
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| ds.y[i]));
        let f = basis_rows(&rows, basis);
        let chol = cholesky_jittered(self_corr(&kern, &rows), jitter, "block")?;
        let l_inv = lower_inverse(&chol);
        let wy = whiten_vec(&chol, &y);
        let wf = whiten_mat(&chol, &f);
        let alpha = chol.solve(&y);
        let kinv_f = chol.solve(&f);
        let logdet = logdet(&chol);
        Ok(Block { indices: idx.clone(), rows, y, f, chol: Arc::new(chol), l_inv, wy, wf, alpha, kinv_f, logdet })
    });
    let mut blocks = Vec::with_capacity(built.len());
    for (b, res) in built.into_iter().enumerate() {
        blocks.push(res.map_err(|e| match e {
            GpError::Factorization { size, jitter, diagnosis, .. } => GpError::Factorization {
                context: format!("block {b}"),
                size,
                jitter,
                diagnosis,
            },
            other => other,
        })?);
    }
    Ok(BlockCache { kern, basis: basis.clone(), jitter, n_total: ds.n(), blocks, whitened: OnceLock::new() })
}

impl BlockCache {
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn block(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn phi(&self) -> &RoughnessParams {
        &self.kern.phi
    }

    pub fn kernel(&self) -> &SquaredExponential {
        &self.kern
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn q(&self) -> usize {
        self.blocks[0].f.ncols()
    }

    pub fn p(&self) -> usize {
        self.kern.phi.dim()
    }

    /// Raw cross-correlation `K(X_i, X_j)` (no nugget).
    pub fn cross(&self, i: usize, j: usize) -> DMatrix<f64> {
        cross_corr(&self.kern, &self.blocks[i].rows, &self.blocks[j].rows)
    }

    /// `L_i^-1 K(X_i, X_j) L_j^-T` for `i < j`, computed once on first use.
    pub fn whitened_cross(&self, i: usize, j: usize) -> &DMatrix<f64> {
        let k = self.k();
        let all = self.whitened.get_or_init(|| {
            let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).collect();
            par::map_slice(&pairs, |&(a, b)| {
                let left = &self.blocks[a].l_inv * self.cross(a, b);
                left * self.blocks[b].l_inv.transpose()
            })
        });
        &all[pair_index(i, j, k)]
    }

    fn check_block(&self, i: usize) -> Result<()> {
        if i >= self.k() {
            return Err(GpError::InvalidArgument(format!("block {i} out of range (k = {})", self.k())));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p() {
            return Err(GpError::DimensionMismatch { expected: self.p(), got: x.len() });
        }
        Ok(())
    }
}

/// Conditional moments of one target against a list of blocks.
#[derive(Debug, Clone)]
pub struct TargetMoments {
    /// Blocks these moments refer to, in order.
    pub blocks: Vec<usize>,
    /// `lambda_i = K(x,X_i) K_i^-1 K(X_i,x)`
    pub lambda: DVector<f64>,
    /// `Lambda_ij = K(x,X_i) K_i^-1 K(X_i,X_j) K_j^-1 K(X_j,x)`, with `Lambda_ii = lambda_i`.
    pub big_lambda: DMatrix<f64>,
    /// `K(x,X_i) K_i^-1 y_i`
    pub kiy: DVector<f64>,
    /// Rows `K(x,X_i) K_i^-1 F_i`
    pub kif: DMatrix<f64>,
    /// `f(x)`
    pub fx: DVector<f64>,
}

impl TargetMoments {
    /// `E[eps_i] = f(x)'beta + K(x,X_i) K_i^-1 (y_i - F_i beta)`.
    pub fn cond_mean(&self, t: usize, beta: &DVector<f64>) -> f64 {
        self.fx.dot(beta) + self.kiy[t] - self.kif.row(t).transpose().dot(beta)
    }

    pub fn cond_means(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.blocks.len(), (0..self.blocks.len()).map(|t| self.cond_mean(t, beta)))
    }

    /// Unit-variance covariance of `(eps_i)`: `1 + Lambda_ij - lambda_i - lambda_j`.
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let m = self.blocks.len();
        let mut k = DMatrix::zeros(m, m);
        for a in 0..m {
            k[(a, a)] = 1.0 - self.lambda[a];
            for b in (a + 1)..m {
                let v = 1.0 + self.big_lambda[(a, b)] - (self.lambda[a] + self.lambda[b]);
                k[(a, b)] = v;
                k[(b, a)] = v;
            }
        }
        k
    }
}

/// Conditional moments of every target against `blocks`, computed with
/// matrix products over the whole batch.
pub fn target_moments(cache: &BlockCache, blocks: &[usize], targets: &[Vec<f64>]) -> Vec<TargetMoments> {
    let nb = blocks.len();
    let m = targets.len();
    if m == 0 {
        return Vec::new();
    }
    // W_i = L_i^-1 K(X_i, targets)
    let whitened: Vec<DMatrix<f64>> = par::map_slice(blocks, |&b| {
        let blk = &cache.blocks[b];
        whiten_mat(&blk.chol, &cross_corr(&cache.kern, &blk.rows, targets))
    });
    let lambda: Vec<DVector<f64>> = whitened.iter().map(|w| col_dots(w, w)).collect();
    let kiy: Vec<DVector<f64>> = whitened
        .iter()
        .zip(blocks)
        .map(|(w, &b)| w.tr_mul(&cache.blocks[b].wy))
        .collect();
    let kif: Vec<DMatrix<f64>> = whitened
        .iter()
        .zip(blocks)
        .map(|(w, &b)| w.tr_mul(&cache.blocks[b].wf))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..nb).flat_map(|a| ((a + 1)..nb).map(move |b| (a, b))).collect();
    let cross: Vec<DVector<f64>> = par::map_slice(&pairs, |&(a, b)| {
        let (ba, bb) = (blocks[a], blocks[b]);
        if ba < bb {
            col_dots(&whitened[a], &(cache.whitened_cross(ba, bb) * &whitened[b]))
        } else {
            col_dots(&whitened[b], &(cache.whitened_cross(bb, ba) * &whitened[a]))
        }
    });
    let q = cache.q();
    (0..m)
        .map(|t| {
            let lam = DVector::from_iterator(nb, lambda.iter().map(|l| l[t]));
            let mut big = DMatrix::from_diagonal(&lam);
            for (&(a, b), c) in pairs.iter().zip(&cross) {
                big[(a, b)] = c[t];
                big[(b, a)] = c[t];
            }
            let mut kf = DMatrix::zeros(nb, q);
            for a in 0..nb {
                kf.row_mut(a).copy_from(&kif[a].row(t));
            }
            TargetMoments {
                blocks: blocks.to_vec(),
                lambda: lam,
                big_lambda: big,
                kiy: DVector::from_iterator(nb, kiy.iter().map(|v| v[t])),
                kif: kf,
                fx: cache.basis.eval(&targets[t]),
            }
        })
        .collect()
}

fn single_target(cache: &BlockCache, blocks: &[usize], x: &[f64]) -> Result<TargetMoments> {
    cache.check_point(x)?;
    for &b in blocks {
        cache.check_block(b)?;
    }
    Ok(target_moments(cache, blocks, &[x.to_vec()]).pop().expect("one target"))
}

/// `E[y(x) | y(X_i) = y_i]`.
pub fn cond_mean(cache: &BlockCache, i: usize, x: &[f64], beta: &DVector<f64>) -> Result<f64> {
    Ok(single_target(cache, &[i], x)?.cond_mean(0, beta))
}

/// Unit-variance `Cov(eps_i, eps_j)` at `x`.
pub fn cond_cross_cov(cache: &BlockCache, i: usize, j: usize, x: &[f64]) -> Result<f64> {
    if i == j {
        return Ok(1.0 - single_target(cache, &[i], x)?.lambda[0]);
    }
    Ok(single_target(cache, &[i, j], x)?.cov_matrix()[(0, 1)])
}

/// Means and unit-variance covariance of `(eps_i)_{i in S}`.
#[derive(Debug, Clone)]
pub struct CondMoments {
    pub blocks: Vec<usize>,
    pub means: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

pub fn cond_cov_matrix(cache: &BlockCache, blocks: &[usize], x: &[f64], beta: &DVector<f64>) -> Result<CondMoments> {
    if blocks.is_empty() {
        return Err(GpError::InvalidArgument("block subset is empty".into()));
    }
    let tm = single_target(cache, blocks, x)?;
    Ok(CondMoments { blocks: blocks.to_vec(), means: tm.cond_means(beta), cov: tm.cov_matrix(), lambda: tm.lambda })
}

/// Minimum-variance weights summing to one for a covariance `k`:
/// `w = K^-1 1 / (1' K^-1 1)` with variance `1 / (1' K^-1 1)`.
pub fn optimal_weights(k: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    if !k.is_square() || k.nrows() == 0 {
        return Err(GpError::InvalidArgument("weight covariance must be square and non-empty".into()));
    }
    let n = k.nrows();
    let chol = cholesky_jittered(k.clone(), jitter_for(n), "conditional covariance")?;
    let u = chol.solve(&DVector::from_element(n, 1.0));
    let s = u.sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(GpError::Numerical(format!("1'K^-1 1 = {s} is not positive")));
    }
    let w = &u / s;
    let total = w.sum();
    Ok((w / total, 1.0 / s))
}

#[doc(hidden)]
pub mod oracle {
    //! Conditional moments from the projection representation
    //! `a'(I - P_A) e + a'A(A'A)^-1 z` built on a factorization of the joint
    //! correlation matrix. Independent of the block-cache path; used by tests
    //! and the debugging CLI verb.

    use super::*;

    /// Means (for trend-free residuals `z_g`) and the full unit-variance
    /// covariance of the block conditionals, for disjoint `groups`.
    pub fn projection_oracle(
        x: &[f64],
        groups: &[Vec<Vec<f64>>],
        z: &[DVector<f64>],
        phi: &RoughnessParams,
        jitter: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let kern = SquaredExponential::new(phi.clone());
        let mut pts = vec![x.to_vec()];
        let mut cols = Vec::new();
        for g in groups {
            let start = pts.len();
            pts.extend(g.iter().cloned());
            cols.push(start..pts.len());
        }
        let m = pts.len();
        let mut joint = self_corr(&kern, &pts);
        for i in 1..m {
            joint[(i, i)] += jitter;
        }
        let chol = joint
            .clone()
            .cholesky()
            .ok_or_else(|| GpError::Numerical("joint correlation not positive definite".into()))?;
        // B'B = joint with B = L'
        let b = chol.l().transpose();
        let a = b.column(0).into_owned();
        let projections: Vec<DMatrix<f64>> = cols
            .iter()
            .map(|c| {
                let ai = b.columns(c.start, c.len()).into_owned();
                let gram = ai.tr_mul(&ai);
                let inv = gram.try_inverse().expect("A'A invertible");
                DMatrix::identity(m, m) - &ai * inv * ai.transpose()
            })
            .collect();
        let means = DVector::from_iterator(
            groups.len(),
            cols.iter().zip(z).map(|(c, zi)| {
                let ai = b.columns(c.start, c.len()).into_owned();
                let gram = ai.tr_mul(&ai);
                let coef = gram.try_inverse().expect("A'A invertible") * zi;
                (a.transpose() * &ai * coef)[0]
            }),
        );
        let g = groups.len();
        let cov = DMatrix::from_fn(g, g, |i, j| (a.transpose() * &projections[i] * &projections[j] * &a)[0]);
        Ok((means, cov))
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::projection_oracle;
    use super::*;
    use crate::design::Partition;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn phi1(v: f64) -> RoughnessParams {
        RoughnessParams::new(vec![v]).unwrap()
    }

    fn dataset(x: &[f64], y: &[f64]) -> Dataset {
        Dataset::new(DMatrix::from_column_slice(x.len(), 1, x), DVector::from_column_slice(y), None).unwrap()
    }

    #[test]
    fn single_block_holds_full_factor() {
        let ds = dataset(&[0.0, 0.4, 1.1], &[1.0, -0.5, 2.0]);
        let cache = build_cache(&ds, &Partition::single(3).unwrap(), &phi1(1.0), &BasisSpec::Constant).unwrap();
        assert_eq!(cache.k(), 1);
        let mut r = crate::kernel::corr_matrix_sym(&ds.x, &phi1(1.0)).unwrap();
        for i in 0..3 {
            r[(i, i)] += cache.jitter();
        }
        let l = r.cholesky().unwrap();
        assert!((cache.block(0).chol.l() - l.l()).amax() < 1e-14);
    }

    #[test]
    fn singleton_blocks_are_scalar_factors() {
        let ds = dataset(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        let part = Partition::new(vec![vec![0], vec![1], vec![2]], 3).unwrap();
        let cache = build_cache(&ds, &part, &phi1(1.0), &BasisSpec::Constant).unwrap();
        for b in cache.blocks() {
            let l = b.chol.l()[(0, 0)];
            assert!((l * l - (1.0 + cache.jitter())).abs() < 1e-15);
        }
    }

    #[test]
    fn solved_vectors_match_dense_solve() {
        let xs = [0.0, 0.3, 0.9, 1.4, 2.2, 2.5];
        let ys = [0.2, -1.0, 0.7, 0.1, 1.9, -0.4];
        let ds = dataset(&xs, &ys);
        let part = Partition::new(vec![vec![0, 2, 4], vec![1, 3, 5]], 6).unwrap();
        let cache = build_cache(&ds, &part, &phi1(2.0), &BasisSpec::Constant).unwrap();
        for b in cache.blocks() {
            let pts = DMatrix::from_fn(b.len(), 1, |i, _| b.rows[i][0]);
            let mut k = crate::kernel::corr_matrix_sym(&pts, &phi1(2.0)).unwrap();
            for i in 0..b.len() {
                k[(i, i)] += cache.jitter();
            }
            let dense = k.lu().solve(&b.y).unwrap();
            assert!((&b.alpha - dense).amax() < 1e-10);
        }
    }

    fn two_block_cache() -> BlockCache {
        let xs = [0.0, 0.5, 1.3, 0.2, 0.9, 1.8];
        let ys = [0.3, -0.2, 1.1, 0.5, 0.0, -0.8];
        let ds = dataset(&xs, &ys);
        let part = Partition::new(vec![vec![0, 1, 2], vec![3, 4, 5]], 6).unwrap();
        build_cache(&ds, &part, &phi1(1.5), &BasisSpec::Constant).unwrap()
    }

    #[test]
    fn conditioning_on_observed_point() {
        let cache = two_block_cache();
        let beta = DVector::from_element(1, 0.4);
        assert!((cond_mean(&cache, 0, &[0.5], &beta).unwrap() - (-0.2)).abs() < 1e-8);
        assert!(cond_cross_cov(&cache, 0, 0, &[0.5]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn decorrelated_limit() {
        let cache = two_block_cache();
        let beta = DVector::from_element(1, 0.4);
        assert!((cond_mean(&cache, 1, &[500.0], &beta).unwrap() - 0.4).abs() < 1e-14);
        assert!((cond_cross_cov(&cache, 0, 1, &[500.0]).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cross_cov_is_symmetric() {
        let cache = two_block_cache();
        let x = [0.77];
        assert_eq!(cond_cross_cov(&cache, 0, 1, &x).unwrap(), cond_cross_cov(&cache, 1, 0, &x).unwrap());
    }

    #[test]
    fn singleton_subset_matrix() {
        let cache = two_block_cache();
        let beta = DVector::zeros(1);
        let m = cond_cov_matrix(&cache, &[1], &[0.66], &beta).unwrap();
        assert_eq!(m.cov.shape(), (1, 1));
        assert!((m.cov[(0, 0)] - (1.0 - m.lambda[0])).abs() == 0.0);
        let m2 = cond_cov_matrix(&cache, &[0, 1], &[0.66], &beta).unwrap();
        assert_eq!(m2.cov[(0, 1)], m2.cov[(1, 0)]);
    }

    #[test]
    fn weights_identity_and_diagonal() {
        let (w, v) = optimal_weights(&DMatrix::identity(2, 2)).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[1] - 0.5).abs() < 1e-9);
        assert!((v - 0.5).abs() < 1e-9);
        let (w, v) = optimal_weights(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-9 && (w[1] - 0.25).abs() < 1e-9);
        assert!((v - 0.75).abs() < 1e-9);
        assert_eq!(w.sum(), 1.0);
    }

    #[test]
    fn weights_beat_random_feasible_points() {
        let mut rng = rng_from_seed(17);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let k = &g * g.transpose() + DMatrix::identity(4, 4) * 0.05;
        let (w, v) = optimal_weights(&k).unwrap();
        assert!(((w.transpose() * &k * &w)[0] - v).abs() < 1e-8);
        for _ in 0..1000 {
            let mut c = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let shift = (1.0 - c.sum()) / 4.0;
            c.add_scalar_mut(shift);
            assert!((c.transpose() * &k * &c)[0] >= v - 1e-10);
        }
    }

    #[test]
    fn nonsquare_weight_matrix_is_rejected() {
        assert!(optimal_weights(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn oracle_degenerate_cases() {
        let ph = phi1(1.0);
        // target coincides with an observed point: everything is projected away
        let g = vec![vec![vec![0.0], vec![0.5]]];
        let (_, cov) = projection_oracle(&[0.5], &g, &[DVector::zeros(2)], &ph, 1e-12).unwrap();
        assert!(cov[(0, 0)].abs() < 1e-8);
        // textbook conditional variance
        let g = vec![vec![vec![0.0], vec![0.9]]];
        let (_, cov) = projection_oracle(&[0.4], &g, &[DVector::zeros(2)], &ph, 0.0).unwrap();
        let kxx = crate::kernel::corr_matrix_sym(&DMatrix::from_column_slice(2, 1, &[0.0, 0.9]), &ph).unwrap();
        let a = DVector::from_vec(vec![(-0.16f64).exp(), (-0.25f64).exp()]);
        let expect = 1.0 - (a.transpose() * kxx.try_inverse().unwrap() * &a)[0];
        assert!((cov[(0, 0)] - expect).abs() < 1e-10);
    }

    #[test]
    fn three_point_blocks_match_oracle() {
        let xs = [0.0, 0.6, 1.5, 0.25, 1.0, 1.9];
        let ys = [0.5, -0.3, 0.8, 0.1, 0.6, -1.2];
        let ds = dataset(&xs, &ys);
        let part = Partition::new(vec![vec![0, 1, 2], vec![3, 4, 5]], 6).unwrap();
        let ph = phi1(1.2);
        let cache = build_cache(&ds, &part, &ph, &BasisSpec::Constant).unwrap();
        let beta = DVector::from_element(1, 0.2);
        let x = [0.8];
        let cm = cond_cov_matrix(&cache, &[0, 1], &x, &beta).unwrap();
        let groups: Vec<Vec<Vec<f64>>> = cache.blocks().iter().map(|b| b.rows.clone()).collect();
        let z: Vec<DVector<f64>> = cache.blocks().iter().map(|b| b.y.add_scalar(-0.2)).collect();
        let (means, cov) = projection_oracle(&x, &groups, &z, &ph, cache.jitter()).unwrap();
        assert!((cm.cov - cov).amax() < 1e-8);
        assert!((cm.means - means.add_scalar(0.2)).amax() < 1e-8);
    }
}

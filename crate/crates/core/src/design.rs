//! Sliced Latin hypercube designs and block partitions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{GpError, Result};
use crate::model::Dataset;
use crate::rng::rng_from_seed;

/// `k` slices of `m` points each in `[0, 1)^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedDesign {
    pub points: DMatrix<f64>,
    /// Zero-based slice of each row.
    pub slice_of: Vec<usize>,
    pub k: usize,
    pub m: usize,
}

impl SlicedDesign {
    pub fn p(&self) -> usize {
        self.points.ncols()
    }

    /// Points mapped affinely from the unit cube onto `[lo, hi]` per dimension.
    pub fn scaled(&self, lo: &[f64], hi: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.points.nrows(), self.p(), |i, d| {
            lo[d] + (hi[d] - lo[d]) * self.points[(i, d)]
        })
    }
}

/// Generates a sliced Latin hypercube.
///
/// Per dimension, the `k*m` fine bins are grouped into `m` coarse bins of `k`
/// consecutive fine bins. Every slice takes exactly one fine bin from every
/// coarse bin (a random permutation of slices within each coarse bin), so each
/// slice is an `m`-point Latin hypercube and the union is a `k*m`-point one.
/// Rows are emitted slice by slice.
pub fn generate_slhd(k: usize, m: usize, p: usize, seed: u64) -> Result<SlicedDesign> {
    if k == 0 || m == 0 || p == 0 {
        return Err(GpError::InvalidArgument("k, m and p must all be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n = k * m;
    let mut points = DMatrix::zeros(n, p);
    let mut slots: Vec<usize> = (0..k).collect();
    let mut coarse: Vec<usize> = (0..m).collect();
    for d in 0..p {
        // fine[t][g]: fine-bin offset inside coarse bin g assigned to slice t
        let mut fine = vec![vec![0usize; m]; k];
        for g in 0..m {
            slots.shuffle(&mut rng);
            for (t, &off) in slots.iter().enumerate() {
                fine[t][g] = off;
            }
        }
        for t in 0..k {
            coarse.shuffle(&mut rng);
            for (j, &g) in coarse.iter().enumerate() {
                let bin = g * k + fine[t][g];
                let u: f64 = rng.gen();
                points[(t * m + j, d)] = (bin as f64 + u) / n as f64;
            }
        }
    }
    let slice_of = (0..n).map(|i| i / m).collect();
    Ok(SlicedDesign { points, slice_of, k, m })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatinViolation {
    /// `None` for the union of all slices.
    pub slice: Option<usize>,
    pub dim: usize,
    pub bin: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlhdReport {
    pub valid: bool,
    pub violations: Vec<LatinViolation>,
}

fn bin_counts(values: impl Iterator<Item = f64>, bins: usize) -> Vec<usize> {
    // half-open bins [b/bins, (b+1)/bins); anything outside [0,1) lands in an
    // overflow slot that is always a violation
    let mut counts = vec![0usize; bins + 1];
    for v in values {
        let b = (v * bins as f64).floor();
        let slot = if (0.0..bins as f64).contains(&b) { b as usize } else { bins };
        counts[slot] += 1;
    }
    counts
}

/// Checks both Latin properties exactly and reports every offending bin.
pub fn validate_slhd(d: &SlicedDesign) -> SlhdReport {
    let mut violations = Vec::new();
    let n = d.points.nrows();
    let mut check = |slice: Option<usize>, dim: usize, rows: &[usize], bins: usize| {
        let counts = bin_counts(rows.iter().map(|&i| d.points[(i, dim)]), bins);
        for (bin, &count) in counts.iter().enumerate() {
            let ok = if bin == bins { count == 0 } else { count == 1 };
            if !ok {
                violations.push(LatinViolation { slice, dim, bin, count });
            }
        }
    };
    if d.slice_of.len() != n || n != d.k * d.m {
        return SlhdReport {
            valid: false,
            violations: vec![LatinViolation { slice: None, dim: 0, bin: 0, count: n }],
        };
    }
    let all: Vec<usize> = (0..n).collect();
    for dim in 0..d.p() {
        check(None, dim, &all, n);
        for t in 0..d.k {
            let rows: Vec<usize> = (0..n).filter(|&i| d.slice_of[i] == t).collect();
            check(Some(t), dim, &rows, d.m);
        }
    }
    SlhdReport { valid: violations.is_empty(), violations }
}

/// Ordered assignment of dataset rows to blocks. Order matters: the first two
/// blocks enter the proposed likelihood exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    /// Validates that `blocks` is a disjoint cover of `0..n` with no empty block.
    pub fn new(blocks: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(GpError::InvalidArgument("partition has no blocks".into()));
        }
        let mut seen = vec![false; n];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(GpError::InvalidArgument(format!("block {b} is empty")));
            }
            for &i in block {
                if i >= n || seen[i] {
                    return Err(GpError::InvalidArgument(format!(
                        "index {i} out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(GpError::InvalidArgument("partition does not cover every point".into()));
        }
        Ok(Self { blocks, n })
    }

    /// One block per distinct label, ordered by label.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            blocks[l].push(i);
        }
        blocks.retain(|b| !b.is_empty());
        Self::new(blocks, labels.len())
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![(0..n).collect()], n)
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// Block of each row.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (b, block) in self.blocks.iter().enumerate() {
            for &i in block {
                out[i] = b;
            }
        }
        out
    }

    /// Same blocks in a new order; `order` must be a permutation of `0..k`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.k()).collect::<Vec<_>>() {
            return Err(GpError::InvalidArgument("block order must be a permutation of 0..k".into()));
        }
        Self::new(order.iter().map(|&b| self.blocks[b].clone()).collect(), self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    BySliceLabels,
    /// Balanced random assignment (block sizes differ by at most one).
    #[default]
    Random,
    /// Sort rows lexicographically, then deal them out to blocks in turn.
    RoundRobinSorted,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" | "by-slice-labels" => Ok(Self::BySliceLabels),
            "random" => Ok(Self::Random),
            "round-robin" | "round-robin-sorted" => Ok(Self::RoundRobinSorted),
            other => Err(GpError::InvalidArgument(format!("unknown partition strategy '{other}'"))),
        }
    }
}

pub fn partition_dataset(ds: &Dataset, k: usize, strategy: PartitionStrategy, seed: u64) -> Result<Partition> {
    let n = ds.n();
    if k == 0 || k > n {
        return Err(GpError::InvalidArgument(format!("block count {k} must be in 1..={n}")));
    }
    match strategy {
        PartitionStrategy::BySliceLabels => {
            let labels = ds.slices.as_ref().ok_or_else(|| {
                GpError::InvalidArgument("dataset carries no slice labels".into())
            })?;
            let part = Partition::from_labels(labels)?;
            if part.k() != k {
                return Err(GpError::InvalidArgument(format!(
                    "dataset has {} slices but {k} blocks were requested",
                    part.k()
                )));
            }
            Ok(part)
        }
        PartitionStrategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng_from_seed(seed));
            let (base, extra) = (n / k, n % k);
            let mut blocks = Vec::with_capacity(k);
            let mut start = 0;
            for b in 0..k {
                let len = base + usize::from(b < extra);
                let mut block = idx[start..start + len].to_vec();
                block.sort_unstable();
                blocks.push(block);
                start += len;
            }
            Partition::new(blocks, n)
        }
        PartitionStrategy::RoundRobinSorted => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                (0..ds.p())
                    .map(|d| ds.x[(a, d)].total_cmp(&ds.x[(b, d)]))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut blocks = vec![Vec::new(); k];
            for (r, &i) in idx.iter().enumerate() {
                blocks[r % k].push(i);
            }
            blocks.iter_mut().for_each(|b| b.sort_unstable());
            Partition::new(blocks, n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn line_dataset(n: usize) -> Dataset {
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        Dataset::new(x, DVector::zeros(n), None).unwrap()
    }

    #[test]
    fn single_slice_is_plain_lhd() {
        let d = generate_slhd(1, 4, 1, 3).unwrap();
        let mut bins: Vec<usize> = d.points.iter().map(|v| (v * 4.0).floor() as usize).collect();
        bins.sort_unstable();
        assert_eq!(bins, vec![0, 1, 2, 3]);
        assert!(validate_slhd(&d).valid);
    }

    #[test]
    fn two_by_two_structure() {
        let d = generate_slhd(2, 2, 1, 11).unwrap();
        assert_eq!(d.points.nrows(), 4);
        assert_eq!(d.slice_of, vec![0, 0, 1, 1]);
        for t in 0..2 {
            let mut coarse: Vec<usize> =
                (0..2).map(|j| (d.points[(t * 2 + j, 0)] * 2.0).floor() as usize).collect();
            coarse.sort_unstable();
            assert_eq!(coarse, vec![0, 1]);
        }
        assert!(validate_slhd(&d).valid);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_slhd(3, 5, 2, 42).unwrap(), generate_slhd(3, 5, 2, 42).unwrap());
        assert_ne!(generate_slhd(3, 5, 2, 42).unwrap(), generate_slhd(3, 5, 2, 43).unwrap());
    }

    #[test]
    fn duplicated_point_is_reported() {
        let mut d = generate_slhd(2, 3, 1, 5).unwrap();
        d.points[(1, 0)] = d.points[(0, 0)];
        let rep = validate_slhd(&d);
        assert!(!rep.valid);
        let bin = (d.points[(0, 0)] * 6.0).floor() as usize;
        assert!(rep.violations.iter().any(|v| v.slice.is_none() && v.bin == bin && v.count == 2));
    }

    #[test]
    fn swapped_slice_labels_break_slice_property() {
        // two points that share a coarse bin moved into the same slice
        let points = DMatrix::from_row_slice(4, 1, &[0.05, 0.55, 0.30, 0.80]);
        let good = SlicedDesign { points: points.clone(), slice_of: vec![0, 0, 1, 1], k: 2, m: 2 };
        assert!(validate_slhd(&good).valid);
        let bad = SlicedDesign { points, slice_of: vec![0, 1, 0, 1], k: 2, m: 2 };
        let rep = validate_slhd(&bad);
        assert!(!rep.valid);
        assert!(rep.violations.iter().all(|v| v.slice.is_some()));
    }

    #[test]
    fn out_of_range_point_is_a_violation() {
        let mut d = generate_slhd(1, 3, 1, 1).unwrap();
        d.points[(0, 0)] = 1.0;
        assert!(!validate_slhd(&d).valid);
    }

    #[test]
    fn partition_edge_cases() {
        let ds = line_dataset(10);
        let p = partition_dataset(&ds, 1, PartitionStrategy::Random, 0).unwrap();
        assert_eq!(p.blocks(), &[(0..10).collect::<Vec<_>>()]);
        let p = partition_dataset(&ds, 10, PartitionStrategy::Random, 0).unwrap();
        assert!(p.sizes().iter().all(|&s| s == 1));
        let p = partition_dataset(&ds, 3, PartitionStrategy::Random, 9).unwrap();
        assert_eq!(p.sizes(), vec![4, 3, 3]);
        assert!(partition_dataset(&ds, 11, PartitionStrategy::Random, 0).is_err());
        assert!(partition_dataset(&ds, 2, PartitionStrategy::BySliceLabels, 0).is_err());
    }

    #[test]
    fn round_robin_interleaves_sorted_rows() {
        let ds = line_dataset(7);
        let p = partition_dataset(&ds, 3, PartitionStrategy::RoundRobinSorted, 0).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 3, 6], vec![1, 4], vec![2, 5]]);
    }

    #[test]
    fn slice_labels_are_copied() {
        let d = generate_slhd(3, 4, 2, 8).unwrap();
        let ds = Dataset::new(d.points.clone(), DVector::zeros(12), Some(d.slice_of.clone())).unwrap();
        let p = partition_dataset(&ds, 3, PartitionStrategy::BySliceLabels, 0).unwrap();
        assert_eq!(p.labels(), d.slice_of);
    }

    proptest! {
        #[test]
        fn generated_designs_are_valid(k in 1usize..6, m in 1usize..8, p in 1usize..4, seed in any::<u64>()) {
            let d = generate_slhd(k, m, p, seed).unwrap();
            prop_assert!(validate_slhd(&d).valid);
        }

        #[test]
        fn partitions_cover_exactly(n in 1usize..60, kfrac in 0.0f64..1.0, seed in any::<u64>(), strat in 0usize..2) {
            let k = 1 + ((n - 1) as f64 * kfrac) as usize;
            let ds = line_dataset(n);
            let s = [PartitionStrategy::Random, PartitionStrategy::RoundRobinSorted][strat];
            let part = partition_dataset(&ds, k, s, seed).unwrap();
            let mut all: Vec<usize> = part.blocks().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(part.k(), k);
        }
    }
}

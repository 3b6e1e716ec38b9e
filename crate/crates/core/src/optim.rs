//! Multi-start Nelder-Mead over log-roughness.

use std::cell::RefCell;

use rand::Rng;

use crate::par;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Number of random starting points.
    pub starts: usize,
    /// Starting points are uniform on `[start_lo, start_hi]^p` in log space.
    pub start_lo: f64,
    pub start_hi: f64,
    /// Search box in log space; vertices are clamped into it.
    pub bound_lo: f64,
    pub bound_hi: f64,
    /// Converged once the simplex diameter drops below this.
    pub tol: f64,
    /// Evaluation budget per start.
    pub max_evals: usize,
    pub initial_step: f64,
    pub seed: u64,
    /// Largest dataset for dense full-likelihood fits.
    pub dense_cap: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            start_lo: -3.0,
            start_hi: 3.0,
            bound_lo: -10.0,
            bound_hi: 10.0,
            tol: 1e-6,
            max_evals: 600,
            initial_step: 0.5,
            seed: 0,
            dense_cap: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in simplex.iter().enumerate() {
        for b in &simplex[i + 1..] {
            let dist = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            d = d.max(dist);
        }
    }
    d
}

/// Nelder-Mead with standard coefficients. Non-finite objective values are
/// treated as `+inf`.
pub fn nelder_mead<F>(f: &F, x0: &[f64], opts: &FitOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let clamp = |x: &mut Vec<f64>| x.iter_mut().for_each(|v| *v = v.clamp(opts.bound_lo, opts.bound_hi));
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let p = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    let mut start = x0.to_vec();
    clamp(&mut start);
    simplex.push(start.clone());
    for d in 0..p {
        let mut v = start.clone();
        v[d] += if v[d] + opts.initial_step <= opts.bound_hi { opts.initial_step } else { -opts.initial_step };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v)).collect();
    let mut converged = false;

    loop {
        let mut order: Vec<usize> = (0..=p).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        if diameter(&simplex) < opts.tol {
            converged = true;
            break;
        }
        if evals.get() >= opts.max_evals {
            break;
        }

        let centroid: Vec<f64> = (0..p).map(|d| simplex[..p].iter().map(|v| v[d]).sum::<f64>() / p as f64).collect();
        let toward = |coef: f64| -> Vec<f64> {
            let mut v: Vec<f64> = centroid.iter().zip(&simplex[p]).map(|(c, w)| c + coef * (w - c)).collect();
            clamp(&mut v);
            v
        };
        let reflected = toward(-1.0);
        let fr = eval(&reflected);
        if fr < values[0] {
            let expanded = toward(-2.0);
            let fe = eval(&expanded);
            if fe < fr {
                simplex[p] = expanded;
                values[p] = fe;
            } else {
                simplex[p] = reflected;
                values[p] = fr;
            }
            continue;
        }
        if fr < values[p - 1] {
            simplex[p] = reflected;
            values[p] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[p] {
            let c = toward(-0.5);
            let fc = eval(&c);
            (c, fc)
        } else {
            let c = toward(0.5);
            let fc = eval(&c);
            (c, fc)
        };
        if fc < values[p].min(fr) {
            simplex[p] = contracted;
            values[p] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=p {
            let v: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, x)| b + 0.5 * (x - b)).collect();
            values[i] = eval(&v);
            simplex[i] = v;
        }
    }
    Minimum { x: simplex[0].clone(), value: values[0], evals: evals.get(), converged }
}

/// Starting points for `p` dimensions; start `s` draws from its own stream.
pub fn start_points(p: usize, opts: &FitOptions) -> Vec<Vec<f64>> {
    (0..opts.starts.max(1))
        .map(|s| {
            let mut rng = stream_rng(opts.seed, s as u64);
            (0..p).map(|_| rng.gen_range(opts.start_lo..opts.start_hi)).collect()
        })
        .collect()
}

/// One objective evaluation seen by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub start: usize,
    /// Evaluation counter within the start, from 1.
    pub eval: usize,
    pub x: Vec<f64>,
    pub value: f64,
}

/// Runs every start (concurrently when enabled) and keeps the best; ties go to
/// the earliest start so the result never depends on scheduling.
pub fn multi_start<F>(f: &F, p: usize, opts: &FitOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let starts = start_points(p, opts);
    let runs = par::map_slice(&starts, |x0| nelder_mead(f, x0, opts));
    best_of(runs)
}

/// [`multi_start`] that also returns every evaluation, ordered by start and
/// then by evaluation.
pub fn multi_start_traced<F>(f: &F, p: usize, opts: &FitOptions) -> (Minimum, Vec<TracePoint>)
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let starts = start_points(p, opts);
    let runs = par::map_range(starts.len(), |s| {
        let trace = RefCell::new(Vec::new());
        let g = |x: &[f64]| {
            let value = f(x);
            let mut t = trace.borrow_mut();
            let eval = t.len() + 1;
            t.push(TracePoint { start: s, eval, x: x.to_vec(), value });
            value
        };
        let m = nelder_mead(&g, &starts[s], opts);
        (m, trace.into_inner())
    });
    let mut all = Vec::new();
    let mut mins = Vec::new();
    for (m, t) in runs {
        mins.push(m);
        all.extend(t);
    }
    (best_of(mins), all)
}

fn best_of(runs: Vec<Minimum>) -> Minimum {
    let mut total = 0;
    let mut best: Option<Minimum> = None;
    for run in runs {
        total += run.evals;
        if best.as_ref().map_or(true, |b| run.value < b.value) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one start");
    best.evals = total;
    best
}

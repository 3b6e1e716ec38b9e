//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use blockgp::conditional::{cond_cov_matrix, oracle::projection_oracle};
use blockgp::full::sample_gp_with;
use blockgp::io::to_json;
use blockgp::predict::{blubp_weights, check_lambda_pd, lambda_system};
use blockgp::rng::{rng_from_seed, GpRng};
use blockgp::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn uniform_points(rng: &mut GpRng, n: usize, p: usize, width: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.gen::<f64>() * width)
}

fn random_params(rng: &mut GpRng, p: usize, phi: (f64, f64)) -> GpParams {
    let phis = (0..p).map(|_| rng.gen_range(phi.0..phi.1)).collect();
    GpParams::new(vec![rng.gen_range(-1.0..1.0)], rng.gen_range(0.5..2.0), RoughnessParams::new(phis).unwrap()).unwrap()
}

/// GP sample at `n` uniform points of `[0, width]^p`.
fn random_model(rng: &mut GpRng, n: usize, p: usize, width: f64, phi: (f64, f64)) -> (Dataset, GpParams) {
    let x = uniform_points(rng, n, p, width);
    let params = random_params(rng, p, phi);
    let y = sample_gp_with(&x, &params, &BasisSpec::Constant, rng).unwrap();
    (Dataset::new(x, y, None).unwrap(), params)
}

/// GP sample on a `k`-slice SLHD over `[0, width]^p`, slices recorded.
fn random_slhd_model(rng: &mut GpRng, k: usize, m: usize, p: usize, width: f64) -> (Dataset, GpParams) {
    let d = generate_slhd(k, m, p, rng.gen()).unwrap();
    let x = d.scaled(&vec![0.0; p], &vec![width; p]);
    let params = random_params(rng, p, (0.3, 2.0));
    let y = sample_gp_with(&x, &params, &BasisSpec::Constant, rng).unwrap();
    (Dataset::new(x, y, Some(d.slice_of)).unwrap(), params)
}

fn random_point(rng: &mut GpRng, p: usize, width: f64) -> Vec<f64> {
    (0..p).map(|_| rng.gen::<f64>() * width).collect()
}

/// Small multi-block configuration with contiguous blocks of 1..=max_size points.
fn small_blocks(rng: &mut GpRng, k: usize, max_size: usize, p: usize) -> (Dataset, Partition, GpParams) {
    let sizes: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=max_size)).collect();
    let n: usize = sizes.iter().sum();
    let (ds, params) = random_model(rng, n, p, 3.0, (0.3, 2.0));
    let mut blocks = Vec::new();
    let mut start = 0;
    for s in sizes {
        blocks.push((start..start + s).collect());
        start += s;
    }
    (ds, Partition::new(blocks, n).unwrap(), params)
}

fn criterion_1() -> Outcome {
    let mut rng = rng_from_seed(101);
    let (mut worst_mean, mut worst_var, mut worst_lik) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (ds, params) = random_slhd_model(&mut rng, 1, 50, 1, 50.0);
        let part = Partition::single(50).unwrap();
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        let full = FullPredictor::new(&ds, &params, &BasisSpec::Constant).unwrap();
        let targets: Vec<Vec<f64>> = (0..20).map(|_| random_point(&mut rng, 1, 50.0)).collect();
        let block = predict_many(&params, &cache, &targets, Predictor::Blubp).unwrap();
        for (x, b) in targets.iter().zip(&block) {
            let f = full.predict(x).unwrap();
            worst_mean = worst_mean.max(rel(b.mean, f.mean));
            worst_var = worst_var.max(rel(b.variance, f.variance));
        }
        for _ in 0..5 {
            let phi = RoughnessParams::new(vec![rng.gen_range(0.3..2.0)]).unwrap();
            let ci = evaluate(&ds, &part, Method::CI, &BasisSpec::Constant, &phi).unwrap().objective;
            let ml = evaluate(&ds, &part, Method::ML, &BasisSpec::Constant, &phi).unwrap().objective;
            worst_lik = worst_lik.max(rel(ci, ml));
        }
    }
    outcome(
        worst_mean <= 1e-8 && worst_var <= 1e-8 && worst_lik <= 1e-12,
        format!("max rel err mean {worst_mean:.1e}, variance {worst_var:.1e}, likelihood {worst_lik:.1e}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = rng_from_seed(202);
    let (mut worst_lik, mut worst_mean) = (0.0f64, 0.0f64);
    let mut mean_errs = Vec::new();
    for _ in 0..50 {
        let n = 2 * rng.gen_range(10..=30);
        let (ds, params) = random_slhd_model(&mut rng, 2, n / 2, 1, n as f64);
        let part = partition_dataset(&ds, 2, PartitionStrategy::BySliceLabels, 0).unwrap();
        let single = Partition::single(n).unwrap();
        for _ in 0..10 {
            let phi = RoughnessParams::new(vec![rng.gen_range(0.3..2.0)]).unwrap();
            let ci = evaluate(&ds, &part, Method::CI, &BasisSpec::Constant, &phi).unwrap().objective;
            let ml = evaluate(&ds, &single, Method::ML, &BasisSpec::Constant, &phi).unwrap().objective;
            worst_lik = worst_lik.max((ci - ml).abs() / ml.abs());
        }
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        let full = FullPredictor::new(&ds, &params, &BasisSpec::Constant).unwrap();
        let targets: Vec<Vec<f64>> = (0..100).map(|_| random_point(&mut rng, 1, n as f64)).collect();
        let block = predict_many(&params, &cache, &targets, Predictor::Blubp).unwrap();
        for (x, b) in targets.iter().zip(&block) {
            let f = full.predict(x).unwrap();
            let err = (b.mean - f.mean).abs() / f.mean.abs().max(1.0);
            worst_mean = worst_mean.max(err);
            mean_errs.push(err);
        }
    }
    mean_errs.sort_by(f64::total_cmp);
    let median = mean_errs[mean_errs.len() / 2];
    outcome(
        worst_lik <= 1e-8 && worst_mean <= 1e-8,
        format!("likelihood max rel err {worst_lik:.1e}; BLUBP vs BLUP mean err median {median:.1e}, max {worst_mean:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from_seed(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.gen_range(1..=2);
        let k = rng.gen_range(2..=4);
        let (ds, part, params) = small_blocks(&mut rng, k, 5, p);
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        let mut subset: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.7)).collect();
        if subset.is_empty() {
            subset.push(rng.gen_range(0..k));
        }
        let x = random_point(&mut rng, p, 3.0);
        let beta = params.beta[0];
        let cm = cond_cov_matrix(&cache, &subset, &x, &DVector::from_element(1, beta)).unwrap();
        let groups: Vec<Vec<Vec<f64>>> = subset.iter().map(|&b| part.blocks()[b].iter().map(|&i| ds.point(i)).collect()).collect();
        let z: Vec<DVector<f64>> = subset
            .iter()
            .map(|&b| DVector::from_iterator(part.blocks()[b].len(), part.blocks()[b].iter().map(|&i| ds.y[i] - beta)))
            .collect();
        let (om, oc) = projection_oracle(&x, &groups, &z, &params.phi, cache.jitter()).unwrap();
        worst = worst.max((&cm.means - om.add_scalar(beta)).amax()).max((&cm.cov - &oc).amax());
    }
    outcome(worst <= 1e-8, format!("max entrywise difference {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut rng = rng_from_seed(404);
    let mut min_eig = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..100 {
        let p = rng.gen_range(1..=2);
        let k = rng.gen_range(2..=6);
        let (ds, part, params) = small_blocks(&mut rng, k, 6, p);
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        let sys = lambda_system(&cache, &random_point(&mut rng, p, 3.0)).unwrap();
        let cert = check_lambda_pd(&sys);
        min_eig = min_eig.min(cert.min_eigenvalue);
        if !(cert.min_eigenvalue > 0.0) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures}/100 not positive definite, smallest eigenvalue {min_eig:.2e}"))
}

fn criterion_5() -> Outcome {
    let mut rng = rng_from_seed(505);
    let (mut beaten, mut order_violations) = (0, 0);
    let mut worst_gap = f64::INFINITY;
    for _ in 0..1000 {
        let p = rng.gen_range(1..=2);
        let k = rng.gen_range(2..=6);
        let (ds, part, params) = small_blocks(&mut rng, k, 6, p);
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        let x = random_point(&mut rng, p, 3.0);
        let sys = lambda_system(&cache, &x).unwrap();
        let (w, _) = blubp_weights(&sys).unwrap();
        let best = sys.objective(&w);
        for _ in 0..1000 {
            let v = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            let shift = (v.sum() - 1.0) / k as f64;
            let other = sys.objective(&v.add_scalar(-shift));
            worst_gap = worst_gap.min(other - best);
            if best > other + 1e-10 {
                beaten += 1;
            }
        }
        let blup = FullPredictor::new(&ds, &params, &BasisSpec::Constant).unwrap().predict(&x).unwrap().variance;
        let blubp = predict_blubp(&params, &cache, &x).unwrap().variance;
        let cl = predict_cl(&params, &cache, &x, &PriorWeights::Equal).unwrap().variance;
        if blup > blubp + 1e-10 || blubp > cl + 1e-10 {
            order_violations += 1;
        }
    }
    outcome(
        beaten == 0 && order_violations == 0,
        format!("KKT beaten {beaten} times (min margin {worst_gap:.1e}); variance order violated {order_violations}/1000"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = rng_from_seed(606);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let p = rng.gen_range(1..=2);
        let k = rng.gen_range(2..=6);
        let n = k * rng.gen_range(4..=10);
        let width = if p == 1 { n as f64 } else { (n as f64).sqrt() };
        let (ds, params) = random_slhd_model(&mut rng, k, n / k, p, width);
        let part = partition_dataset(&ds, k, PartitionStrategy::BySliceLabels, 0).unwrap();
        let cache = build_cache(&ds, &part, &params.phi, &BasisSpec::Constant).unwrap();
        for i in 0..n {
            let r = predict_blubp(&params, &cache, &ds.point(i)).unwrap();
            worst_mean = worst_mean.max((r.mean - ds.y[i]).abs());
            worst_var = worst_var.max(r.variance / params.sigma2);
        }
    }
    outcome(worst_mean <= 1e-6 && worst_var <= 1e-8, format!("max |mean - y| {worst_mean:.1e}, max variance/sigma2 {worst_var:.1e}"))
}

fn criterion_7() -> Outcome {
    let mut counts = BTreeMap::new();
    for k in [4, 8] {
        let mut wins = 0;
        for seed in 0..20 {
            let mut cfg = ExperimentConfig::approx(k);
            cfg.seed = seed;
            cfg.grid = 1000;
            let (s, _) = run_approx_study(&cfg, None).unwrap();
            if s.mean_abs_diff["CI"] < s.mean_abs_diff["CL"] {
                wins += 1;
            }
        }
        counts.insert(k, wins);
    }
    outcome(counts.values().all(|&w| w >= 18), format!("BLUBP closer to BLUP in {}/20 (k=4), {}/20 (k=8)", counts[&4], counts[&8]))
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::table_1d();
    cfg.seed = 7;
    let report = run_table_study(&cfg, None).unwrap();
    let get = |m, name| report.param(m, name).unwrap().clone();
    let (ml, ci, cml) = (get(Method::ML, "phi1"), get(Method::CI, "phi1"), get(Method::CML, "phi1"));
    let a = (ci.mse - ml.mse).abs() <= 0.15 * ml.mse;
    let b = cml.mse >= 1.5 * ci.mse;
    let c = (ci.bias - ml.bias).abs() <= 0.05;
    let mut d = true;
    let mut d_detail = Vec::new();
    for name in ["beta1", "sigma2"] {
        let (m, i) = (get(Method::ML, name), get(Method::CI, name));
        d &= (i.mse - m.mse).abs() <= 0.10 * m.mse && (i.bias - m.bias).abs() <= 0.10 * m.mse.sqrt();
        d_detail.push(format!("{name} bias {:.4}/{:.4} mse {:.4}/{:.4}", m.bias, i.bias, m.mse, i.mse));
    }
    let mark = |ok: bool| if ok { "ok" } else { "fail" };
    outcome(
        a && b && c && d && report.failed_replications == 0,
        format!(
            "phi ML bias {:.4} mse {:.4}, CI bias {:.4} mse {:.4}, CML mse {:.4}; (a) {} (b) {} (c) {} (d) {} [{}]; failed reps {}",
            ml.bias,
            ml.mse,
            ci.bias,
            ci.mse,
            cml.mse,
            mark(a),
            mark(b),
            mark(c),
            mark(d),
            d_detail.join(", "),
            report.failed_replications
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = ExperimentConfig::schwefel();
    let report = run_schwefel_study(&cfg, None).unwrap();
    let mse = |m| report.method(m).unwrap().mse_pred.unwrap_or(f64::NAN);
    let (ci, cml, ccl) = (mse(Method::CI), mse(Method::CML), mse(Method::CCL));
    outcome(ci < cml && ci < ccl, format!("prediction MSE CI {ci:.4}, CML {cml:.4}, CCL {ccl:.4}"))
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let mut table_1d = ExperimentConfig::table_1d();
    (table_1d.reps, table_1d.n, table_1d.k, table_1d.grid) = (4, 40, 4, 100);
    let mut table_2d = ExperimentConfig::table_2d();
    (table_2d.reps, table_2d.n, table_2d.k, table_2d.grid) = (2, 36, 3, 8);
    let mut schwefel = ExperimentConfig::schwefel();
    (schwefel.n, schwefel.k, schwefel.n_test, schwefel.max_evals) = (200, 4, 100, 80);
    let mut approx = ExperimentConfig::approx(4);
    approx.seed = 3;

    type Study = Box<dyn Fn(&Path) -> String + Send + Sync>;
    let studies: Vec<(&str, Study)> = vec![
        ("approx", Box::new(move |d| to_json(&run_approx_study(&approx, Some(d)).unwrap().0).unwrap())),
        ("table-1d", Box::new(move |d| to_json(&run_table_study(&table_1d, Some(d)).unwrap()).unwrap())),
        ("table-2d", Box::new(move |d| to_json(&run_table_study(&table_2d, Some(d)).unwrap()).unwrap())),
        ("schwefel", Box::new(move |d| to_json(&run_schwefel_study(&schwefel, Some(d)).unwrap()).unwrap())),
    ];
    let mut differing = Vec::new();
    for (name, study) in &studies {
        let runs: Vec<(String, Vec<(String, Vec<u8>)>)> = [1, 3]
            .iter()
            .map(|&threads| {
                let dir = tempfile::tempdir().unwrap();
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                let report = pool.install(|| study(dir.path()));
                (report, outputs(dir.path()))
            })
            .collect();
        if runs[0] != runs[1] || runs[0].1.is_empty() {
            differing.push(*name);
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} studies byte-identical on 1 and 3 threads", studies.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, fn() -> Outcome, Duration); 10] = [
        (1, criterion_1, Duration::from_secs(10)),
        (2, criterion_2, Duration::from_secs(30)),
        (3, criterion_3, Duration::from_secs(10)),
        (4, criterion_4, Duration::from_secs(10)),
        (5, criterion_5, Duration::from_secs(60)),
        (6, criterion_6, Duration::MAX),
        (7, criterion_7, Duration::from_secs(60)),
        (8, criterion_8, Duration::from_secs(15 * 60)),
        (9, criterion_9, Duration::from_secs(10 * 60)),
        (10, criterion_10, Duration::MAX),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, check, budget) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = check();
        let elapsed = started.elapsed();
        let in_time = elapsed <= budget;
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        let budget_note = if in_time { "" } else { ", over time budget" };
        println!(
            "criterion {id}: {} ({}; {:.1} s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

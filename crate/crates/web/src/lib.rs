//! WebAssembly bindings for the browser demo. Every export returns a JSON
//! string; errors surface as thrown JavaScript errors.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use blockgp::predict::{predict_blubp, predict_cl, PriorWeights};
use blockgp::study::{run_approx_study, ApproxCurves, ExperimentConfig};
use blockgp::{build_cache, generate_slhd, BasisSpec, GpError, PredictionResult};

#[derive(Serialize)]
struct Curve {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Curve {
    fn of(preds: &[PredictionResult]) -> Self {
        Curve { mean: preds.iter().map(|r| r.mean).collect(), sd: preds.iter().map(|r| r.sd()).collect() }
    }
}

#[derive(Serialize)]
struct CurvesDoc {
    x: Vec<f64>,
    y: Vec<f64>,
    block: Vec<usize>,
    grid: Vec<f64>,
    blup: Curve,
    blubp: Curve,
    cl: Curve,
    mean_abs_diff_blubp: f64,
    mean_abs_diff_cl: f64,
}

#[derive(Serialize)]
struct WeightsDoc {
    x: f64,
    blubp: Vec<f64>,
    cl: Vec<f64>,
    blubp_mean: f64,
    blubp_sd: f64,
    cl_mean: f64,
    cl_sd: f64,
}

#[derive(Serialize)]
struct DesignDoc {
    points: Vec<[f64; 2]>,
    slice: Vec<usize>,
}

fn approx(k: usize, phi: f64, seed: u64) -> Result<ApproxCurves, GpError> {
    let mut cfg = ExperimentConfig::approx(k);
    cfg.phi = vec![phi];
    cfg.seed = seed;
    cfg.grid = 200;
    Ok(run_approx_study(&cfg, None)?.1)
}

pub fn curves_json(k: usize, phi: f64, seed: u64) -> Result<String, GpError> {
    let c = approx(k, phi, seed)?;
    let diff = |a: &[PredictionResult]| a.iter().zip(&c.blup).map(|(p, q)| (p.mean - q.mean).abs()).sum::<f64>() / a.len() as f64;
    let doc = CurvesDoc {
        x: c.data.x.column(0).iter().copied().collect(),
        y: c.data.y.iter().copied().collect(),
        block: c.partition.labels(),
        grid: c.grid.iter().map(|g| g[0]).collect(),
        blup: Curve::of(&c.blup),
        blubp: Curve::of(&c.blubp),
        cl: Curve::of(&c.cl),
        mean_abs_diff_blubp: diff(&c.blubp),
        mean_abs_diff_cl: diff(&c.cl),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn weights_json(k: usize, phi: f64, seed: u64, x: f64) -> Result<String, GpError> {
    let mut cfg = ExperimentConfig::approx(k);
    cfg.phi = vec![phi];
    let c = approx(k, phi, seed)?;
    let params = cfg.params()?;
    let cache = build_cache(&c.data, &c.partition, &params.phi, &BasisSpec::Constant)?;
    let b = predict_blubp(&params, &cache, &[x])?;
    let l = predict_cl(&params, &cache, &[x], &PriorWeights::Equal)?;
    let doc = WeightsDoc {
        x,
        blubp: b.weights.clone().unwrap_or_default(),
        cl: l.weights.clone().unwrap_or_default(),
        blubp_mean: b.mean,
        blubp_sd: b.sd(),
        cl_mean: l.mean,
        cl_sd: l.sd(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn slhd_json(k: usize, m: usize, seed: u64) -> Result<String, GpError> {
    let d = generate_slhd(k, m, 2, seed)?;
    let points = (0..d.points.nrows()).map(|i| [d.points[(i, 0)], d.points[(i, 1)]]).collect();
    Ok(serde_json::to_string(&DesignDoc { points, slice: d.slice_of })?)
}

fn js(r: Result<String, GpError>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// BLUP, BLUBP and composite-likelihood prediction curves for 16 points in `k` blocks.
#[wasm_bindgen]
pub fn curves(k: usize, phi: f64, seed: u64) -> Result<String, JsError> {
    js(curves_json(k, phi, seed))
}

/// Block weights of both predictors at `x`.
#[wasm_bindgen]
pub fn weights(k: usize, phi: f64, seed: u64, x: f64) -> Result<String, JsError> {
    js(weights_json(k, phi, seed, x))
}

/// A two-dimensional sliced Latin hypercube with `k` slices of `m` points.
#[wasm_bindgen]
pub fn slhd(k: usize, m: usize, seed: u64) -> Result<String, JsError> {
    js(slhd_json(k, m, seed))
}

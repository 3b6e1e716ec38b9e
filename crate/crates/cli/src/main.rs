use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use blockgp::conditional::{build_cache, cond_cov_matrix, oracle::projection_oracle};
use blockgp::design::{generate_slhd, partition_dataset, Partition, PartitionStrategy};
use blockgp::full::{sample_gp_with, FullPredictor};
use blockgp::io;
use blockgp::predict::{predict_many, Predictor, PriorWeights};
use blockgp::rng::stream_rng;
use blockgp::study::{predict_fitted, run_approx_study, run_schwefel_study, run_table_study, ExperimentConfig};
use blockgp::{fit_composite_traced, BasisSpec, Dataset, GpError, GpParams, Method, RoughnessParams};

#[derive(Parser)]
#[command(name = "blockgp", version, about = "Gaussian-process regression with block composite likelihoods")]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or output directory for studies.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat TOML file with experiment settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a sliced Latin hypercube design.
    Slhd(SlhdArgs),
    /// Sample GP responses on a design.
    Simulate(SimulateArgs),
    /// Fit a model by ML, CI, CML or CCL.
    Fit(FitArgs),
    /// Predict at new points with a fitted model.
    Predict(PredictArgs),
    /// Prediction curves of BLUP, BLUBP and the composite-likelihood predictor.
    ApproxStudy(ApproxArgs),
    /// Bias and MSE of the estimators over simulated replications.
    TableStudy(TableArgs),
    /// Surrogate study on the Schwefel function.
    SchwefelStudy(SchwefelArgs),
    /// Compare block conditional moments with the projection oracle.
    #[command(hide = true)]
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SlhdArgs {
    /// Number of slices.
    #[arg(long)]
    k: usize,
    /// Points per slice.
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    /// Lower bounds, one value or one per dimension (default 0).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lo: Vec<f64>,
    /// Upper bounds, one value or one per dimension (default 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    hi: Vec<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Design CSV `x1..xp[,slice]`; without it an SLHD is generated from --k/--m/--p.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    lo: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    hi: Vec<f64>,
    /// Roughness, one value (isotropic) or one per dimension.
    #[arg(long, value_delimiter = ',', required = true)]
    phi: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    beta: Vec<f64>,
    #[arg(long, default_value = "constant")]
    basis: String,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    data: PathBuf,
    /// Number of blocks (default: the dataset's slices).
    #[arg(long)]
    k: Option<usize>,
    /// auto, slice, random or round-robin.
    #[arg(long, default_value = "auto")]
    partition: String,
    #[arg(long, default_value = "constant")]
    basis: String,
    /// Block processing order as a 1-based permutation, e.g. 3,1,2.
    #[arg(long, value_delimiter = ',')]
    block_order: Option<Vec<usize>>,
    /// Write every objective evaluation to this CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    points: PathBuf,
    /// blup, blubp or cl (default: the one paired with the fitting method).
    #[arg(long)]
    predictor: Option<String>,
    /// Used only when the model file carries no partition.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "auto")]
    partition: String,
}

#[derive(Args, Default)]
struct StudyOverrides {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct ApproxArgs {
    #[command(flatten)]
    over: StudyOverrides,
}

#[derive(Args)]
struct TableArgs {
    /// 1d or 2d.
    #[arg(long)]
    scenario: Option<String>,
    #[command(flatten)]
    over: StudyOverrides,
}

#[derive(Args)]
struct SchwefelArgs {
    #[arg(long)]
    n_test: Option<usize>,
    /// Permit datasets beyond the desk-scale limit (ML must be excluded).
    #[arg(long)]
    allow_large: bool,
    #[command(flatten)]
    over: StudyOverrides,
}

#[derive(Args)]
struct OracleArgs {
    /// Dataset with a slice column; slices are the blocks.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    phi: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta: f64,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<GpError> for Failure {
    fn from(e: GpError) -> Self {
        Failure { code: if e.is_validation() { 2 } else { 3 }, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        GpError::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx { seed: cli.seed, out: cli.out, config: cli.config };
    match cli.cmd {
        Cmd::Slhd(a) => slhd(&ctx, a),
        Cmd::Simulate(a) => simulate(&ctx, a),
        Cmd::Fit(a) => fit(&ctx, a),
        Cmd::Predict(a) => predict(&ctx, a),
        Cmd::ApproxStudy(a) => approx_study(&ctx, a),
        Cmd::TableStudy(a) => table_study(&ctx, a),
        Cmd::SchwefelStudy(a) => schwefel_study(&ctx, a),
        Cmd::Oracle(a) => oracle(a),
    }
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Writes to `--out` or stdout.
    fn emit(&self, bytes: &[u8]) -> CliResult<()> {
        match &self.out {
            Some(p) => fs::write(p, bytes)?,
            None => std::io::stdout().lock().write_all(bytes)?,
        }
        Ok(())
    }
}

fn bounds(lo: &[f64], hi: &[f64], p: usize) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let expand = |v: &[f64], default: f64, name: &str| -> CliResult<Vec<f64>> {
        match v.len() {
            0 => Ok(vec![default; p]),
            1 => Ok(vec![v[0]; p]),
            l if l == p => Ok(v.to_vec()),
            l => Err(invalid(format!("--{name} has {l} values for p = {p}"))),
        }
    };
    let (lo, hi) = (expand(lo, 0.0, "lo")?, expand(hi, 1.0, "hi")?);
    if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
        return Err(invalid("every --lo must be below the matching --hi"));
    }
    Ok((lo, hi))
}

fn slhd(ctx: &Ctx, a: SlhdArgs) -> CliResult<()> {
    let d = generate_slhd(a.k, a.m, a.p, ctx.seed())?;
    let (lo, hi) = bounds(&a.lo, &a.hi, a.p)?;
    let mut buf = Vec::new();
    io::write_design(&mut buf, &d.scaled(&lo, &hi), &d)?;
    ctx.emit(&buf)
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> CliResult<()> {
    let (x, slices) = match &a.points {
        Some(path) => {
            let (pts, labels) = io::read_labeled_points(fs::File::open(path)?)?;
            let p = pts.first().map_or(0, Vec::len);
            (DMatrix::from_fn(pts.len(), p, |i, j| pts[i][j]), labels)
        }
        None => {
            let (k, m) = match (a.k, a.m) {
                (Some(k), Some(m)) => (k, m),
                _ => return Err(invalid("give --points, or --k and --m to generate a design")),
            };
            let d = generate_slhd(k, m, a.p, ctx.seed())?;
            let (lo, hi) = bounds(&a.lo, &a.hi, a.p)?;
            (d.scaled(&lo, &hi), Some(d.slice_of.clone()))
        }
    };
    let p = x.ncols();
    let phi = if a.phi.len() == 1 { vec![a.phi[0]; p] } else { a.phi.clone() };
    let params = GpParams::new(a.beta.clone(), a.sigma2, RoughnessParams::new(phi)?)?;
    let basis = BasisSpec::from_name(&a.basis)?;
    let y = sample_gp_with(&x, &params, &basis, &mut stream_rng(ctx.seed(), 1))?;
    let ds = Dataset::new(x, y, slices)?;
    let mut buf = Vec::new();
    io::write_dataset(&mut buf, &ds)?;
    ctx.emit(&buf)
}

fn read_data(path: &Path) -> CliResult<Dataset> {
    Ok(io::read_dataset(fs::File::open(path)?)?)
}

fn slice_count(ds: &Dataset) -> Option<usize> {
    ds.slices.as_ref().map(|s| s.iter().max().map_or(0, |m| m + 1))
}

fn make_partition(ds: &Dataset, k: Option<usize>, strategy: &str, seed: u64) -> CliResult<Partition> {
    let strategy = match strategy {
        "auto" => match (slice_count(ds), k) {
            (Some(s), None) => return Ok(partition_dataset(ds, s, PartitionStrategy::BySliceLabels, seed)?),
            (Some(s), Some(k)) if s == k => return Ok(partition_dataset(ds, s, PartitionStrategy::BySliceLabels, seed)?),
            _ => PartitionStrategy::Random,
        },
        other => other.parse::<PartitionStrategy>()?,
    };
    let k = match (strategy, k) {
        (_, Some(k)) => k,
        (PartitionStrategy::BySliceLabels, None) => slice_count(ds).ok_or_else(|| invalid("dataset has no slice column"))?,
        _ => return Err(invalid("--k is required for this partition")),
    };
    Ok(partition_dataset(ds, k, strategy, seed)?)
}

/// Scenario defaults, then the config file, with `scenario` in the file
/// selecting the defaults when no scenario is given explicitly.
fn load_config(ctx: &Ctx, default_scenario: &str, scenario: Option<&str>) -> CliResult<ExperimentConfig> {
    let file: toml::Table = match &ctx.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| invalid(format!("config: {e}")))?,
        None => toml::Table::new(),
    };
    let name = match (scenario, file.get("scenario")) {
        (Some(s), _) => s.to_string(),
        (None, Some(toml::Value::String(s))) => s.clone(),
        (None, Some(_)) => return Err(invalid("config: scenario must be a string")),
        (None, None) => default_scenario.to_string(),
    };
    let base = ExperimentConfig::for_scenario(&name)?;
    let mut merged = match toml::Value::try_from(&base).map_err(|e| invalid(format!("config: {e}")))? {
        toml::Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    for (k, v) in file {
        merged.insert(k, v);
    }
    merged.insert("scenario".into(), toml::Value::String(name));
    let mut cfg: ExperimentConfig = toml::Value::Table(merged).try_into().map_err(|e| invalid(format!("config: {e}")))?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply(cfg: &mut ExperimentConfig, o: StudyOverrides) {
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = o.$f { cfg.$f = v; })*};
    }
    set!(reps, n, k, grid, methods, starts, max_evals, tol);
}

fn fit(ctx: &Ctx, a: FitArgs) -> CliResult<()> {
    let ds = read_data(&a.data)?;
    let cfg = load_config(ctx, "1d", None)?;
    let mut opts = cfg.fit_options(ctx.seed());
    if let Some(v) = a.starts {
        opts.starts = v;
    }
    if let Some(v) = a.max_evals {
        opts.max_evals = v;
    }
    if let Some(v) = a.tol {
        opts.tol = v;
    }
    let basis = BasisSpec::from_name(&a.basis)?;
    let mut part = if a.method == Method::ML {
        Partition::single(ds.n())?
    } else {
        make_partition(&ds, a.k, &a.partition, ctx.seed())?
    };
    if let Some(order) = &a.block_order {
        if order.contains(&0) {
            return Err(invalid("--block-order is 1-based"));
        }
        part = part.reordered(&order.iter().map(|b| b - 1).collect::<Vec<_>>())?;
    }
    let (model, trace) = fit_composite_traced(&ds, &part, a.method, &basis, &opts)?;
    if let Some(path) = &a.trace {
        io::write_trace(fs::File::create(path)?, &trace)?;
    }
    ctx.emit(io::model_to_json(&model)?.as_bytes())
}

fn predict(ctx: &Ctx, a: PredictArgs) -> CliResult<()> {
    let model = io::model_from_json(&fs::read_to_string(&a.model)?)?;
    let ds = read_data(&a.data)?;
    let targets = io::read_points(fs::File::open(&a.points)?)?;
    let part = match &model.partition {
        Some(p) if p.n() != ds.n() => {
            return Err(invalid(format!("model partition covers {} rows but the data has {}", p.n(), ds.n())))
        }
        Some(p) => p.clone(),
        None if model.method == Method::ML => Partition::single(ds.n())?,
        None => make_partition(&ds, a.k, &a.partition, ctx.seed())?,
    };
    let preds = match a.predictor.as_deref() {
        None => predict_fitted(&model, &ds, &part, &targets)?,
        Some("blup") => {
            let full = FullPredictor::new(&ds, &model.params, &model.basis)?;
            targets.iter().map(|x| full.predict(x)).collect::<Result<Vec<_>, _>>()?
        }
        Some(kind @ ("blubp" | "cl")) => {
            let cache = build_cache(&ds, &part, &model.params.phi, &model.basis)?;
            let kind = if kind == "blubp" { Predictor::Blubp } else { Predictor::CompositeLikelihood(PriorWeights::Equal) };
            predict_many(&model.params, &cache, &targets, kind)?
        }
        Some(other) => return Err(invalid(format!("unknown predictor '{other}'"))),
    };
    let mut buf = Vec::new();
    io::write_predictions(&mut buf, &targets, &preds)?;
    ctx.emit(&buf)
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    std::io::stdout().lock().write_all(io::to_json(v)?.as_bytes())?;
    Ok(())
}

fn approx_study(ctx: &Ctx, a: ApproxArgs) -> CliResult<()> {
    let mut cfg = load_config(ctx, "approx", None)?;
    apply(&mut cfg, a.over);
    let (summary, _) = run_approx_study(&cfg, ctx.out.as_deref())?;
    print_json(&summary)
}

fn table_study(ctx: &Ctx, a: TableArgs) -> CliResult<()> {
    let mut cfg = load_config(ctx, "1d", a.scenario.as_deref())?;
    apply(&mut cfg, a.over);
    let report = run_table_study(&cfg, ctx.out.as_deref())?;
    print_json(&report)
}

fn schwefel_study(ctx: &Ctx, a: SchwefelArgs) -> CliResult<()> {
    let mut cfg = load_config(ctx, "schwefel", Some("schwefel"))?;
    apply(&mut cfg, a.over);
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    cfg.allow_large |= a.allow_large;
    let report = run_schwefel_study(&cfg, ctx.out.as_deref())?;
    print_json(&report)
}

#[derive(Serialize)]
struct OracleReport {
    means: Vec<f64>,
    cov: Vec<Vec<f64>>,
    oracle_means: Vec<f64>,
    oracle_cov: Vec<Vec<f64>>,
    max_abs_diff: f64,
}

fn oracle(a: OracleArgs) -> CliResult<()> {
    let ds = read_data(&a.data)?;
    let k = slice_count(&ds).ok_or_else(|| invalid("oracle needs a slice column"))?;
    let part = partition_dataset(&ds, k, PartitionStrategy::BySliceLabels, 0)?;
    let phi = RoughnessParams::new(if a.phi.len() == 1 { vec![a.phi[0]; ds.p()] } else { a.phi })?;
    let cache = build_cache(&ds, &part, &phi, &BasisSpec::Constant)?;
    let all: Vec<usize> = (0..k).collect();
    let cm = cond_cov_matrix(&cache, &all, &a.x, &DVector::from_element(1, a.beta))?;
    let groups: Vec<Vec<Vec<f64>>> = part.blocks().iter().map(|b| b.iter().map(|&i| ds.point(i)).collect()).collect();
    let z: Vec<DVector<f64>> = part.blocks().iter().map(|b| DVector::from_iterator(b.len(), b.iter().map(|&i| ds.y[i] - a.beta))).collect();
    let (om, oc) = projection_oracle(&a.x, &groups, &z, &phi, cache.jitter())?;
    let om = om.add_scalar(a.beta);
    let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let diff = (&cm.means - &om).amax().max((&cm.cov - &oc).amax());
    print_json(&OracleReport {
        means: cm.means.iter().copied().collect(),
        cov: rows(&cm.cov),
        oracle_means: om.iter().copied().collect(),
        oracle_cov: rows(&oc),
        max_abs_diff: diff,
    })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dvgnn_core::config::RunConfig;
use dvgnn_core::data::{self, SimSpec};
use dvgnn_core::gradsuite;
use dvgnn_core::metrics::MetricsReport;
use dvgnn_core::pipeline::{self, TrainedModel};
use dvgnn_core::{Error, Graph};

#[derive(Parser)]
#[command(name = "dvgnn", version, about = "Dynamic causal graph learning and graph forecasting")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Override a config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a linear SDE with a planted causal graph.
    Simulate(SimulateArgs),
    /// Train the variational graph encoder and diffusion decoder.
    TrainGraph(TrainArgs),
    /// Train the forecaster on top of a trained graph model.
    TrainForecast(ForecastArgs),
    /// Both training stages plus evaluation on the test split.
    Pipeline(PipelineArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Copy a dataset with Poisson noise added to its training split.
    Noise(NoiseArgs),
    /// Finite-difference check of every differentiable op and both losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    nodes: usize,
    #[arg(long, default_value_t = 15)]
    edges: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    drift_diag: f64,
    #[arg(long, default_value_t = 0.3)]
    weight_min: f64,
    #[arg(long, default_value_t = 0.6)]
    weight_max: f64,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    hidden1: Option<usize>,
    #[arg(long)]
    hidden2: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epochs_graph: Option<usize>,
    #[arg(long)]
    epochs_forecast: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_graph: Option<f64>,
    #[arg(long)]
    lr_forecast: Option<f64>,
    /// on, off or auto (on exactly when the dataset has an adjacency).
    #[arg(long)]
    mask: Option<String>,
    /// dynamic or static.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut push = |k: &'static str, x: Option<String>| {
            if let Some(x) = x {
                v.push((k, x));
            }
        };
        push("hidden1", self.hidden1.map(|x| x.to_string()));
        push("hidden2", self.hidden2.map(|x| x.to_string()));
        push("p", self.p.map(|x| x.to_string()));
        push("horizon", self.horizon.map(|x| x.to_string()));
        push("epochs_graph", self.epochs_graph.map(|x| x.to_string()));
        push("epochs_forecast", self.epochs_forecast.map(|x| x.to_string()));
        push("batch", self.batch.map(|x| x.to_string()));
        push("lr_graph", self.lr_graph.map(|x| x.to_string()));
        push("lr_forecast", self.lr_forecast.map(|x| x.to_string()));
        push("mask", self.mask.clone());
        push("ablation", self.ablation.clone());
        push("threshold", self.threshold.map(|x| x.to_string()));
        v
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest.
    data: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ForecastArgs {
    data: PathBuf,
    /// Model file from train-graph.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PipelineArgs {
    data: PathBuf,
    /// Ground-truth graph; defaults to truth.csv next to the dataset.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Interleave graph and forecast updates per batch.
    #[arg(long)]
    joint: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Require causal evaluation against a ground-truth graph.
    #[arg(long)]
    causal: bool,
    /// Horizon range for the per-horizon rows, e.g. `1..12`.
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct NoiseArgs {
    data: PathBuf,
    #[arg(long = "lambda")]
    lambda: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

#[derive(Debug)]
struct ToleranceExceeded(f64);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: worst relative error {:.3e} >= 1e-4", self.0)
    }
}

impl std::error::Error for ToleranceExceeded {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<ToleranceExceeded>() {
        return 4;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Contract(_) | Error::Dimension { .. }) => 2,
        Some(Error::Divergence { .. } | Error::NonFinite(_) | Error::Spec(_)) => 4,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("DVGNN_THREADS") {
        let n = match threads.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: DVGNN_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn build_config(cli: &Cli, overrides: Option<&Overrides>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(o) = overrides {
        for (k, v) in o.pairs() {
            cfg.set(k, &v)?;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(data: &Path) -> anyhow::Result<dvgnn_core::data::TimeSeriesDataset> {
    data::load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))
}

fn dataset_dir(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.to_path_buf()
    } else {
        data.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn resolve_truth(data: &Path, explicit: Option<&Path>) -> anyhow::Result<Option<Graph>> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let p = dataset_dir(data).join("truth.csv");
            p.exists().then_some(p)
        }
    };
    path.map(|p| Graph::read_csv(&p).with_context(|| format!("reading truth graph {}", p.display())))
        .transpose()
}

/// Runs `body` with the `.incomplete` marker present in `dir`.
fn with_marker(dir: &Path, body: impl FnOnce() -> anyhow::Result<()>) -> anyhow::Result<()> {
    pipeline::begin_outputs(dir)?;
    body()?;
    pipeline::finish_outputs(dir)?;
    Ok(())
}

fn log(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(&cli, a),
        Command::TrainGraph(a) => train_graph(&cli, a),
        Command::TrainForecast(a) => train_forecast(&cli, a),
        Command::Pipeline(a) => run_pipeline(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Noise(a) => noise(&cli, a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
    }
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, None)?;
    let spec = SimSpec {
        n_nodes: a.nodes,
        n_true_edges: a.edges,
        drift_diag: a.drift_diag,
        weight_range: (a.weight_min, a.weight_max),
        dt: a.dt,
        steps: a.steps,
        noise_scale: a.noise,
        seed: cfg.train.seed,
        ..SimSpec::default()
    };
    let sim = data::simulate_sde(&spec)?;
    sim.write(&cfg.out)?;
    println!(
        "simulated {} nodes x {} steps, {} true edges, dt {}, noise {}, seed {}, step spectral radius {:.4} -> {}",
        spec.n_nodes,
        spec.steps,
        sim.truth.edge_count(),
        spec.dt,
        spec.noise_scale,
        spec.seed,
        data::sim::step_spectral_radius(&sim.drift, spec.dt),
        cfg.out.display()
    );
    Ok(())
}

fn train_graph(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, Some(&a.overrides))?;
    let raw = load(&a.data)?;
    let out = cfg.out.clone();
    with_marker(&out, || {
        let (model, log_) = pipeline::train_graph(&raw, &cfg)?;
        log(cli.verbose, || format!("graph stage: loss {:?} -> {:?}", log_.first_loss(), log_.last_loss()));
        pipeline::write_model(&model, &out)?;
        log_.write(&out.join("graph_log.csv"))?;
        let norm = model.stats.apply(&pipeline::prepare(&raw)?);
        let graphs = model.graph.graphs(&norm, 0..norm.steps)?;
        dvgnn_core::io::write_atomic(
            &out.join("graphs.csv"),
            pipeline::graphs_csv(&graphs, 0..norm.steps).as_bytes(),
        )?;
        Ok(())
    })
}

fn train_forecast(cli: &Cli, a: &ForecastArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, Some(&a.overrides))?;
    let raw = load(&a.data)?;
    let mut model = TrainedModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    if model.p != cfg.p || model.horizon != cfg.horizon {
        log(cli.verbose, || {
            format!("using window p={} horizon={} stored in the model", model.p, model.horizon)
        });
    }
    let mut cfg = cfg;
    cfg.p = model.p;
    cfg.horizon = model.horizon;
    let out = cfg.out.clone();
    with_marker(&out, || {
        let log_ = pipeline::train_forecast(&mut model, &raw, &cfg)?;
        log(cli.verbose, || format!("forecast stage: loss {:?} -> {:?}", log_.first_loss(), log_.last_loss()));
        pipeline::write_model(&model, &out)?;
        log_.write(&out.join("forecast_log.csv"))?;
        Ok(())
    })
}

/// Closed stdout (e.g. piped into `head`) is not an error.
fn print_metrics(m: &MetricsReport) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    for (k, v) in &m.0 {
        if writeln!(out, "{k} = {v}").is_err() {
            return;
        }
    }
}

fn run_pipeline(cli: &Cli, a: &PipelineArgs) -> anyhow::Result<()> {
    let mut cfg = build_config(cli, Some(&a.overrides))?;
    cfg.joint |= a.joint;
    let raw = load(&a.data)?;
    let truth = resolve_truth(&a.data, a.truth.as_deref())?;
    let out = cfg.out.clone();
    with_marker(&out, || {
        let result = pipeline::run_pipeline(&raw, truth.as_ref(), &cfg)?;
        pipeline::write_pipeline(&result, &out)?;
        if cli.verbose {
            print_metrics(&result.eval.metrics);
        }
        Ok(())
    })
}

/// Parses `a..b` or `a..=b` (both inclusive) or a single horizon.
fn parse_horizons(s: &str, max: usize) -> anyhow::Result<std::ops::RangeInclusive<usize>> {
    let bad = || Error::Contract(format!("invalid horizon range {s:?}"));
    let (lo, hi) = match s.split_once("..") {
        Some((lo, hi)) => {
            let hi = hi.trim_start_matches('=');
            (lo.trim().parse::<usize>().map_err(|_| bad())?, hi.trim().parse::<usize>().map_err(|_| bad())?)
        }
        None => {
            let k = s.trim().parse::<usize>().map_err(|_| bad())?;
            (k, k)
        }
    };
    if lo == 0 || lo > hi || hi > max {
        bail!(Error::Contract(format!("horizon range {s:?} must lie within 1..{max}")));
    }
    Ok(lo..=hi)
}

fn eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = build_config(cli, None)?;
    if let Some(t) = a.threshold {
        cfg.set("threshold", &t.to_string())?;
    }
    let raw = load(&a.data)?;
    let model = TrainedModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let truth = resolve_truth(&a.data, a.truth.as_deref())?;
    if a.causal && truth.is_none() {
        bail!(Error::Data(format!(
            "causal evaluation needs a truth graph: pass --truth or place truth.csv in {}",
            dataset_dir(&a.data).display()
        )));
    }
    let horizons = match &a.horizons {
        Some(s) => Some(parse_horizons(s, model.horizon)?),
        None => None,
    };
    let out = cfg.out.clone();
    with_marker(&out, || {
        let e = pipeline::evaluate(&model, &raw, truth.as_ref(), cfg.threshold, cfg.include_diagonal)?;
        pipeline::write_evaluation(&e, &out)?;
        if let Some(range) = horizons {
            let mut s = String::from("horizon,rmse,mae\n");
            for h in range {
                s.push_str(&format!("{h},{},{}\n", e.model.rmse[h - 1], e.model.mae[h - 1]));
            }
            dvgnn_core::io::write_atomic(&out.join("horizon_curve.csv"), s.as_bytes())?;
        }
        print_metrics(&e.metrics);
        Ok(())
    })
}

fn noise(cli: &Cli, a: &NoiseArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, None)?;
    let raw = load(&a.data)?;
    let mut noisy = data::inject_poisson(&raw, a.lambda, cfg.train.seed)?;
    noisy.extra.retain(|(k, _)| k != "noise_lambda" && k != "noise_seed");
    noisy.extra.push(("noise_lambda".into(), a.lambda.to_string()));
    noisy.extra.push(("noise_seed".into(), cfg.train.seed.to_string()));
    data::write_dataset(&noisy, &cfg.out)?;
    let src = dataset_dir(&a.data);
    for f in ["truth.csv", "drift.csv"] {
        if src.join(f).exists() {
            std::fs::copy(src.join(f), cfg.out.join(f))?;
        }
    }
    log(cli.verbose, || format!("wrote noisy copy (lambda {}) to {}", a.lambda, cfg.out.display()));
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> anyhow::Result<()> {
    let cfg = build_config(cli, None)?;
    let results = gradsuite::run_suite(cfg.train.seed, a.instances)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<16} instances {:>4}  max rel err {:.3e}", r.name, r.instances, r.max_error);
        worst = worst.max(r.max_error);
    }
    println!("worst {worst:.3e}");
    if worst >= 1e-4 {
        bail!(ToleranceExceeded(worst));
    }
    Ok(())
}

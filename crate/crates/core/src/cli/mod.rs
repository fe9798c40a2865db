//! Command-line front end: `gen-data`, `train`, `sweep`, `calibrate` and
//! `report`. Every command is a pure function of its inputs and seed, so
//! rerunning it reproduces its output files byte for byte.

pub mod config;
pub mod experiment;
pub mod sweep;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{make_blobs, make_two_moons, split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{PredictionLog, DEFAULT_BINS};
use crate::network::Network;
use crate::numerics::Rng;
use crate::trainer::{evaluate, Model};

pub use config::{ExperimentConfig, GridAxis, MetricOptions};
pub use experiment::{run_experiment, CalibrationReport, ModelMetrics};
pub use sweep::run_sweep;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_COLLAPSED: i32 = 4;
pub const OUT_ENV: &str = "CALIBREG_OUT";
const DEFAULT_OUT: &str = "calibreg_out";
const ENTROPY_BINS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "calibreg", version, about = "Function-norm regularization and calibration experiments")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel jobs for repeats and sweep points (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory; the CALIBREG_OUT environment variable takes precedence.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of equal-width confidence bins.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    #[arg(long = "nbaucc-tau", global = true)]
    pub nbaucc_tau: Option<f64>,
    #[arg(long = "nbaucc-steps", global = true)]
    pub nbaucc_steps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV.
    GenData(GenDataArgs),
    /// Train, evaluate and report one experiment config.
    Train,
    /// Run a config's parameter grid and select by validation accuracy.
    Sweep,
    /// Fit a temperature on one half of a dataset and evaluate on the other.
    Calibrate(CalibrateArgs),
    /// Reliability and entropy tables from prediction logs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Blobs,
    TwoMoons,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub kind: GeneratorKind,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 0.215)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "dataset.csv")]
    pub file: String,
    /// Also write train/validation/test splits (0.8/0.1/0.1).
    #[arg(long)]
    pub split: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Fit on each half and evaluate on the other, averaging both directions.
    #[arg(long)]
    pub split_half: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Prediction log files (CSV or JSON).
    #[arg(long = "log", required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long, default_value_t = ENTROPY_BINS)]
    pub entropy_bins: usize,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Io { .. } => EXIT_FAILURE,
        Error::DimensionMismatch { .. }
        | Error::InvalidArgument { .. }
        | Error::DecayOvershoot { .. }
        | Error::Parse { .. } => EXIT_INVALID,
    }
}

/// Output directory: `CALIBREG_OUT`, then `--out`, then the config, then a default.
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    flag.or(config).map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf)
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid("cli", format!("cannot start {jobs} jobs: {e}")))?;
    Ok(pool.install(f))
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(cli, a),
        Command::Train => cmd_train(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn metric_options(cli: &Cli, base: &MetricOptions) -> MetricOptions {
    MetricOptions {
        bins: cli.bins.unwrap_or(base.bins),
        nbaucc_tau: cli.nbaucc_tau.unwrap_or(base.nbaucc_tau),
        nbaucc_steps: cli.nbaucc_steps.unwrap_or(base.nbaucc_steps),
    }
}

/// Loads `--config` and applies the command-line overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("cli", "this command needs --config PATH"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.metrics = metric_options(cli, &cfg.metrics);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<i32> {
    let seed = cli.seed.unwrap_or(0);
    let ds = match a.kind {
        GeneratorKind::Blobs => make_blobs(a.k, a.n, a.d, a.spread, seed)?,
        GeneratorKind::TwoMoons => make_two_moons(a.n, a.noise, seed)?,
    };
    let dir = resolve_out(cli.out.as_deref(), None);
    experiment::write_file(&dir.join(&a.file), &ds.to_csv())?;
    if a.split {
        let spec = SplitSpec {
            seed,
            ..SplitSpec::default()
        };
        let (tr, va, te) = split(&ds, &spec)?;
        for (name, part) in [("train.csv", tr), ("validation.csv", va), ("test.csv", te)] {
            experiment::write_file(&dir.join(name), &part.to_csv())?;
        }
    }
    println!("wrote {} rows to {}", ds.len(), dir.join(&a.file).display());
    Ok(EXIT_OK)
}

pub fn cmd_train(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    if !cfg.grid.is_empty() {
        return Err(Error::invalid("cli", "config has a grid; use the sweep command"));
    }
    let dir = resolve_out(cli.out.as_deref(), cfg.output_dir.as_deref());
    let outcome = with_pool(cli.jobs, || run_experiment(&cfg))??;
    experiment::write_outcome(&outcome, &dir)?;
    let agg = &outcome.report.aggregate.test;
    println!(
        "{}: accuracy {:.4} nll {:.4} ece {:.4} |f|_2 {:.3} ({} repeat(s)) -> {}",
        outcome.report.tag,
        agg.accuracy,
        agg.nll,
        agg.ece,
        agg.f_l2,
        outcome.report.runs.len(),
        dir.display()
    );
    if outcome.report.trivial_solution {
        eprintln!("trivial solution: test |f|_2 collapsed below 1% of its epoch-1 value");
        return Ok(EXIT_COLLAPSED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_sweep(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    let dir = resolve_out(cli.out.as_deref(), cfg.output_dir.as_deref());
    let (outcome, _) = with_pool(cli.jobs, || run_sweep(&cfg))??;
    sweep::write_sweep(&outcome, &dir)?;
    match &outcome.selection {
        Some(s) => println!(
            "{} points; selected point {} {} (mean validation accuracy {:.4}) -> {}",
            outcome.points.len(),
            s.index,
            serde_json::Value::from(s.values.clone()),
            s.mean_val_accuracy,
            dir.display()
        ),
        None => println!("{} points; every point diverged -> {}", outcome.points.len(), dir.display()),
    }
    Ok(EXIT_OK)
}

pub const CALIBRATION_SCHEMA: &str = "calibreg.calibration";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDirection {
    pub fit_rows: usize,
    pub eval_rows: usize,
    pub tau: f64,
    pub fit: crate::calibration::TemperatureFit,
    pub before: ModelMetrics,
    pub after: ModelMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub schema: String,
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub directions: Vec<CalibrationDirection>,
    pub mean_tau: f64,
    pub mean_before: ModelMetrics,
    pub mean_after: ModelMetrics,
}

/// Temperature scaling on a seeded half/half partition of `data`.
pub fn calibrate(net: &Network, data: &Dataset, split_half: bool, seed: u64, opts: &MetricOptions) -> Result<CalibrationOutput> {
    if data.len() < 2 {
        return Err(Error::invalid("cli", "calibration needs at least 2 rows"));
    }
    let perm = Rng::new(seed).fork_named("calibrate").permutation(data.len());
    let half = data.len() / 2;
    let (a, b) = (data.subset(&perm[..half]), data.subset(&perm[half..]));
    let mut pairs = vec![(&a, &b)];
    if split_half {
        pairs.push((&b, &a));
    }
    let mut directions = Vec::new();
    for (fit_set, eval_set) in pairs {
        let fit_log = evaluate(&Model::Single(net), fit_set, None)?;
        let fit = crate::calibration::fit_temperature(&fit_log.logits_matrix(), &fit_set.labels)?;
        let eval_log = evaluate(&Model::Single(net), eval_set, None)?;
        let scaled = experiment::scale_log(&eval_log, fit.tau)?;
        directions.push(CalibrationDirection {
            fit_rows: fit_set.len(),
            eval_rows: eval_set.len(),
            tau: fit.tau,
            before: ModelMetrics::compute(&eval_log, opts)?,
            after: ModelMetrics::compute(&scaled, opts)?,
            fit,
        });
    }
    let n = directions.len() as f64;
    let before: Vec<ModelMetrics> = directions.iter().map(|d| d.before.clone()).collect();
    let after: Vec<ModelMetrics> = directions.iter().map(|d| d.after.clone()).collect();
    Ok(CalibrationOutput {
        schema: CALIBRATION_SCHEMA.to_string(),
        version: 1,
        mode: if split_half { "split_half" } else { "holdout" }.to_string(),
        seed,
        mean_tau: directions.iter().map(|d| d.tau).sum::<f64>() / n,
        mean_before: ModelMetrics::mean(&before).expect("one direction"),
        mean_after: ModelMetrics::mean(&after).expect("one direction"),
        directions,
    })
}

pub fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<i32> {
    let net = Network::load(&a.model)?;
    let data = Dataset::load_csv(&a.data)?;
    if data.input_dim() != net.input_dim() || data.num_classes() != net.num_classes() {
        return Err(Error::invalid(
            "cli",
            format!(
                "model expects {} inputs and {} classes, data has {} and {}",
                net.input_dim(),
                net.num_classes(),
                data.input_dim(),
                data.num_classes()
            ),
        ));
    }
    let opts = metric_options(cli, &MetricOptions::default());
    let out = calibrate(&net, &data, a.split_half, cli.seed.unwrap_or(0), &opts)?;
    let dir = resolve_out(cli.out.as_deref(), None);
    experiment::write_file(
        &dir.join("calibration.json"),
        &serde_json::to_string_pretty(&out).expect("calibration serializes"),
    )?;
    println!(
        "tau {:.4}: ece {:.4} -> {:.4}, nll {:.4} -> {:.4} -> {}",
        out.mean_tau,
        out.mean_before.ece,
        out.mean_after.ece,
        out.mean_before.nll,
        out.mean_after.nll,
        dir.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<i32> {
    if a.entropy_bins == 0 {
        return Err(Error::invalid("cli", "--entropy-bins must be >= 1"));
    }
    let bins = cli.bins.unwrap_or(DEFAULT_BINS);
    let mut reliability = Vec::new();
    let mut entropy = Vec::new();
    for path in &a.logs {
        let log = PredictionLog::load(path)?;
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        if !log.in_distribution().is_empty() {
            reliability.extend(experiment::reliability_rows(&name, &log, bins)?);
        }
        entropy.extend(experiment::entropy_rows(&name, &log, a.entropy_bins)?);
    }
    let dir = resolve_out(cli.out.as_deref(), None);
    experiment::write_file(&dir.join("reliability.csv"), &experiment::reliability_csv(&reliability))?;
    experiment::write_file(&dir.join("entropy_histogram.csv"), &experiment::entropy_csv(&entropy))?;
    println!("{} log(s) -> {}", a.logs.len(), dir.display());
    Ok(EXIT_OK)
}

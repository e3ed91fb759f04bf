//! `gpode` command-line tool.

mod config;
mod times;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gpode::bench::{
    add_noise, fit_summary, linspace, run_experiment, simulate_benchmark, BenchmarkSystem, ExperimentConfig,
    ExperimentKind,
};
use gpode::field::GridSpec;
use gpode::io::{
    format_report, model_to_string, prediction_to_string, read_dataset, read_model, read_series, series_to_string,
};
use gpode::model::{fit, select_lengthscale, Dataset, FitConfig, LengthscaleSelection, DEFAULT_LENGTHSCALES};
use gpode::odeint::SolverConfig;

use config::FileConfig;

const DEFAULT_SEED: u64 = 0x5EED;

#[derive(Debug, Parser)]
#[command(name = "gpode", version, about = "Learn unknown ODE dynamics from time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark oscillator and write clean.csv and noisy.csv.
    Simulate(SimulateArgs),
    /// Fit a model to one or more series files.
    Fit(FitArgs),
    /// Integrate a fitted model over a time grid.
    Predict(PredictArgs),
    /// Run a forecasting or imputation experiment on a series file.
    Experiment(ExperimentArgs),
    /// Select the kernel lengthscale by validation on the last 20% of each series.
    Gridsearch(GridsearchArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// One of vdp, fhn, lv.
    #[arg(long)]
    system: BenchmarkSystem,
    /// Number of frames.
    #[arg(long, default_value_t = 25)]
    n: usize,
    /// Length of the series in oscillation periods.
    #[arg(long, default_value_t = 1.0)]
    cycles: f64,
    /// Standard deviation of the Gaussian observation noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Initial state as comma-separated values; the system default otherwise.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Fitting options shared by the fitting commands. Unset flags fall back to
/// the config file, then to built-in defaults.
#[derive(Debug, Args, Default)]
struct FitOptions {
    /// Flat key/value TOML file with defaults for these options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Standard deviation of the restart perturbation.
    #[arg(long)]
    perturbation: Option<f64>,
    /// Optimizer iteration limit per restart.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Relative solver tolerance while fitting.
    #[arg(long)]
    rtol: Option<f64>,
    /// Absolute solver tolerance while fitting.
    #[arg(long)]
    atol: Option<f64>,
    /// Inducing points per dimension.
    #[arg(long)]
    grid_count: Option<usize>,
    /// Grid padding as a fraction of the data range.
    #[arg(long)]
    grid_margin: Option<f64>,
    /// Lengthscale candidates; more than one selects by validation.
    #[arg(long, value_delimiter = ',')]
    lengthscales: Option<Vec<f64>>,
    /// Run restarts one after another.
    #[arg(long)]
    serial: bool,
}

/// Fully resolved fitting options.
#[derive(Debug, Clone, PartialEq)]
struct Resolved {
    fit: FitConfig,
    grid_count: usize,
    grid_margin: f64,
    lengthscales: Vec<f64>,
    pca_dim: usize,
    downsample: usize,
}

impl FitOptions {
    fn resolve(&self, default_lengthscales: &[f64]) -> Result<(Resolved, FileConfig)> {
        let file = FileConfig::load(self.config.as_deref())?;
        let defaults = FitConfig::default();
        let mut fit = FitConfig {
            restarts: self.restarts.or(file.restarts).unwrap_or(defaults.restarts),
            perturbation: self.perturbation.or(file.perturbation).unwrap_or(defaults.perturbation),
            seed: self.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            parallel: !self.serial && file.parallel.unwrap_or(true),
            ..defaults
        };
        if let Some(n) = self.max_iterations.or(file.max_iterations) {
            fit.optim.max_iterations = n;
        }
        fit.solver.rtol = self.rtol.or(file.rtol).unwrap_or(fit.solver.rtol);
        fit.solver.atol = self.atol.or(file.atol).unwrap_or(fit.solver.atol);
        let lengthscales = self
            .lengthscales
            .clone()
            .or(file.lengthscales.clone())
            .unwrap_or_else(|| default_lengthscales.to_vec());
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            bail!("lengthscales must be positive and finite");
        }
        let experiment_defaults = ExperimentConfig::default();
        let resolved = Resolved {
            fit,
            grid_count: self.grid_count.or(file.grid_count).unwrap_or(experiment_defaults.grid_count),
            grid_margin: self.grid_margin.or(file.grid_margin).unwrap_or(experiment_defaults.grid_margin),
            lengthscales,
            pca_dim: file.pca_dim.unwrap_or(0),
            downsample: file.downsample.unwrap_or(1),
        };
        Ok((resolved, file))
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Series CSV files (`t,x1,...`), one trajectory each.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    /// Output report file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    options: FitOptions,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Time grid as start:step:end (end included when on the grid).
    #[arg(
        long,
        value_parser = parse_time_grid,
        conflicts_with = "times_file",
        required_unless_present = "times_file"
    )]
    times: Option<TimeGrid>,
    /// File with one time per line.
    #[arg(long)]
    times_file: Option<PathBuf>,
    /// Start state as comma-separated values.
    #[arg(long, value_delimiter = ',', conflicts_with = "series")]
    x0: Option<Vec<f64>>,
    /// Start from the fitted initial state of this training series.
    #[arg(long, default_value_t = 0)]
    series: usize,
    /// Output CSV with mean and one-standard-deviation band per dimension.
    #[arg(long)]
    out: PathBuf,
}

/// Parsed `--times` value.
#[derive(Debug, Clone, PartialEq)]
struct TimeGrid(Vec<f64>);

fn parse_time_grid(text: &str) -> std::result::Result<TimeGrid, String> {
    times::parse_range(text).map(TimeGrid).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Forecast,
    Impute,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Directory for report.txt, prediction.csv and observed.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Latent dimension; 0 fits in the original space.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Keep every k-th frame.
    #[arg(long)]
    downsample: Option<usize>,
    #[command(flatten)]
    options: FitOptions,
}

#[derive(Debug, Args)]
struct GridsearchArgs {
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Output report file.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    options: FitOptions,
}

/// Writes next to `path` and renames, so a failed run never leaves a
/// partial artifact behind.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn entry(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn selection_entries(sel: &LengthscaleSelection) -> Vec<(String, String)> {
    let mut out = vec![entry("selected_lengthscale", sel.best)];
    for c in &sel.candidates {
        let value = match (&c.validation_rmse, &c.error) {
            (Some(r), _) => r.to_string(),
            (None, Some(e)) => format!("failed ({e})"),
            (None, None) => "not evaluated".to_string(),
        };
        out.push((format!("validation_rmse_l{}", c.lengthscale), value));
    }
    out
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    if args.n < 2 {
        bail!("--n must be at least 2");
    }
    if !(args.cycles > 0.0 && args.cycles.is_finite()) {
        bail!("--cycles must be positive");
    }
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        bail!("--noise must be non-negative");
    }
    let x0: [f64; 2] = match &args.x0 {
        Some(v) => [v[0], v[1]],
        None => args.system.initial_state(),
    };
    let solver = SolverConfig::default();
    let period = args.system.period(x0, &solver)?;
    let clean = simulate_benchmark(args.system, &x0, &linspace(args.cycles * period, args.n), &solver)?;
    let noisy = add_noise(&clean, args.noise, args.seed)?;
    create_dir(&args.out_dir)?;
    write_atomic(&args.out_dir.join("clean.csv"), &series_to_string(&clean)?)?;
    write_atomic(&args.out_dir.join("noisy.csv"), &series_to_string(&noisy)?)?;
    println!("{} period {period}, wrote {} frames to {}", args.system, args.n, args.out_dir.display());
    Ok(())
}

fn grid_for(data: &Dataset, opts: &Resolved) -> Result<GridSpec> {
    Ok(GridSpec::covering(&data.all_states(), opts.grid_count, opts.grid_margin)?)
}

fn fit_command(args: &FitArgs) -> Result<()> {
    let (opts, _) = args.options.resolve(&[1.0])?;
    let data = read_dataset(&args.data)?;
    let grid = grid_for(&data, &opts)?;
    let selection = select_lengthscale(&data, &grid, &opts.lengthscales, &opts.fit)?;
    let fitted = fit(&data, &grid, &vec![selection.best; data.dim()], &opts.fit)
        .with_context(|| format!("fitting {} restarts", opts.fit.restarts))?;

    write_atomic(&args.model, &model_to_string(&fitted.model)?)?;
    let mut entries = vec![
        entry("model", args.model.display()),
        entry("series", data.series().len()),
        entry("dimension", data.dim()),
        entry("inducing_points", grid.len()),
        entry("seed", opts.fit.seed),
    ];
    entries.extend(selection_entries(&selection));
    entries.extend(fit_summary(&fitted.model, &fitted.diagnostics));
    let report = format_report(&entries);
    match &args.report {
        Some(path) => write_atomic(path, &report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn predict_command(args: &PredictArgs) -> Result<()> {
    let times = match (&args.times, &args.times_file) {
        (Some(grid), _) => grid.0.clone(),
        (None, Some(path)) => times::read_list(path)?,
        (None, None) => bail!("either --times or --times-file is required"),
    };
    let model = read_model(&args.model)?;
    let pred = match &args.x0 {
        Some(x0) => model.predict(&times, Some(x0))?,
        None => model.predict_series(args.series, &times)?,
    };
    write_atomic(&args.out, &prediction_to_string(&pred)?)?;
    Ok(())
}

fn experiment_command(args: &ExperimentArgs) -> Result<()> {
    let (opts, _) = args.options.resolve(&[1.0])?;
    let series = read_series(&args.data)?.trajectory;
    let cfg = ExperimentConfig {
        fit: opts.fit.clone(),
        grid_count: opts.grid_count,
        grid_margin: opts.grid_margin,
        lengthscales: opts.lengthscales.clone(),
        pca_dim: args.pca_dim.unwrap_or(opts.pca_dim),
        downsample: args.downsample.unwrap_or(opts.downsample),
    };
    let kind = match args.kind {
        Kind::Forecast => ExperimentKind::Forecast,
        Kind::Impute => ExperimentKind::Impute,
    };
    let report = run_experiment(&series, kind, &cfg)?;

    create_dir(&args.out_dir)?;
    let prediction_path = args.out_dir.join("prediction.csv");
    let observed_path = args.out_dir.join("observed.csv");
    write_atomic(&prediction_path, &series_to_string(&report.prediction)?)?;
    write_atomic(&observed_path, &series_to_string(&report.observed)?)?;
    let mut entries = vec![
        entry("data", args.data.display()),
        entry("seed", cfg.fit.seed),
        entry("prediction_file", prediction_path.display()),
        entry("observed_file", observed_path.display()),
        entry("test_times", join(&report.test_times())),
    ];
    entries.extend(report.summary());
    write_atomic(&args.out_dir.join("report.txt"), &format_report(&entries))?;
    println!("{} rmse {}", kind.name(), report.rmse);
    Ok(())
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn gridsearch_command(args: &GridsearchArgs) -> Result<()> {
    let (opts, _) = args.options.resolve(&DEFAULT_LENGTHSCALES)?;
    let data = read_dataset(&args.data)?;
    let grid = grid_for(&data, &opts)?;
    let selection = select_lengthscale(&data, &grid, &opts.lengthscales, &opts.fit)?;
    let mut entries = vec![
        entry("series", data.series().len()),
        entry("candidates", join(&opts.lengthscales)),
        entry("seed", opts.fit.seed),
    ];
    entries.extend(selection_entries(&selection));
    write_atomic(&args.report, &format_report(&entries))?;
    println!("selected lengthscale {}", selection.best);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit_command(&a),
        Command::Predict(a) => predict_command(&a),
        Command::Experiment(a) => experiment_command(&a),
        Command::Gridsearch(a) => gridsearch_command(&a),
    }
}

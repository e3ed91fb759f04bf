//! Benchmark oscillators, noise injection, PCA and the forecasting and
//! imputation experiment harnesses.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::field::GridSpec;
use crate::model::{fit, select_lengthscale, Dataset, FitConfig, FitDiagnostics, FittedModel};
use crate::odeint::{integrate, SolverConfig, Trajectory, VectorField};

/// The three two-dimensional oscillators used as ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkSystem {
    VanDerPol,
    FitzHughNagumo,
    LotkaVolterra,
}

impl BenchmarkSystem {
    pub const ALL: [BenchmarkSystem; 3] = [Self::VanDerPol, Self::FitzHughNagumo, Self::LotkaVolterra];

    pub fn name(self) -> &'static str {
        match self {
            Self::VanDerPol => "vdp",
            Self::FitzHughNagumo => "fhn",
            Self::LotkaVolterra => "lv",
        }
    }

    /// Reference initial state.
    pub fn initial_state(self) -> [f64; 2] {
        match self {
            Self::VanDerPol => [2.0, 0.0],
            Self::FitzHughNagumo => [-1.0, 1.0],
            Self::LotkaVolterra => [5.0, 1.0],
        }
    }

    /// Number of cycles covered by the reference training data.
    pub fn training_cycles(self) -> f64 {
        match self {
            Self::LotkaVolterra => 1.7,
            _ => 1.0,
        }
    }

    pub fn eval(self, x: [f64; 2]) -> [f64; 2] {
        let [a, b] = x;
        match self {
            Self::VanDerPol => [b, (1.0 - a * a) * b - a],
            Self::FitzHughNagumo => [3.0 * (a - a * a * a / 3.0 + b), (0.2 - 3.0 * a - 0.2 * b) / 3.0],
            Self::LotkaVolterra => [1.5 * a - a * b, -3.0 * b + a * b],
        }
    }

    /// Oscillation period of the orbit through `x0`.
    ///
    /// Measured as the mean spacing of upward crossings of `x₁` through the
    /// middle of its range, skipping an initial transient of two crossings.
    pub fn period(self, x0: [f64; 2], cfg: &SolverConfig) -> Result<f64> {
        let horizon = 80.0;
        let n = 16001;
        let times: Vec<f64> = (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect();
        let tr = integrate(&self, &x0, &times, cfg)?;
        let x1 = tr.states().column(0);
        let tail = x1.rows(n / 2, n - n / 2);
        let mid = 0.5 * (tail.max() + tail.min());
        let mut crossings = Vec::new();
        for i in 1..n {
            let (a, b) = (x1[i - 1] - mid, x1[i] - mid);
            if a < 0.0 && b >= 0.0 {
                let frac = a / (a - b);
                crossings.push(times[i - 1] + frac * (times[i] - times[i - 1]));
            }
        }
        if crossings.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "{} orbit from {x0:?} does not oscillate within t = {horizon}",
                self.name()
            )));
        }
        let used = &crossings[2..];
        Ok((used[used.len() - 1] - used[0]) / (used.len() - 1) as f64)
    }
}

impl fmt::Display for BenchmarkSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sys| sys.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown system {s:?}, expected one of vdp, fhn, lv")))
    }
}

impl VectorField for BenchmarkSystem {
    fn dim(&self) -> usize {
        2
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.eval([x[0], x[1]]));
    }
}

/// Evaluates the true field of `system` at `x`.
pub fn eval_true_field(system: BenchmarkSystem, x: &[f64]) -> Result<[f64; 2]> {
    check_dim(2, x.len())?;
    Ok(system.eval([x[0], x[1]]))
}

pub fn simulate_benchmark(system: BenchmarkSystem, x0: &[f64], times: &[f64], cfg: &SolverConfig) -> Result<Trajectory> {
    check_dim(2, x0.len())?;
    integrate(&system, x0, times, cfg)
}

/// `n` equispaced times on `[0, end]`.
pub fn linspace(end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| end * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise to every state entry.
pub fn add_noise(traj: &Trajectory, sigma: f64, seed: u64) -> Result<Trajectory> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = traj.states().clone();
    if sigma > 0.0 {
        // row-major draw order so that the noise of a frame does not depend on D
        for i in 0..states.nrows() {
            for j in 0..states.ncols() {
                states[(i, j)] += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Trajectory::new(traj.times().to_vec(), states)
}

/// Relative mean-norm error of a learned field against a benchmark:
/// `mean ‖f̂(x) - f(x)‖ / mean ‖f(x)‖` over the rows of `points`.
pub fn field_error(learned: &dyn VectorField, system: BenchmarkSystem, points: &DMatrix<f64>) -> Result<f64> {
    check_dim(2, points.ncols())?;
    check_dim(2, learned.dim())?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut fx = [0.0; 2];
    for row in points.row_iter() {
        let x = [row[0], row[1]];
        learned.eval_into(&x, &mut fx);
        let truth = system.eval(x);
        num += ((fx[0] - truth[0]).powi(2) + (fx[1] - truth[1]).powi(2)).sqrt();
        den += (truth[0].powi(2) + truth[1].powi(2)).sqrt();
    }
    if points.nrows() == 0 || den == 0.0 {
        return Err(Error::InvalidArgument("field error needs points where the true field is nonzero".into()));
    }
    Ok(num / den)
}

/// Centered principal component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    mean: DVector<f64>,
    components: DMatrix<f64>,
    explained: Vec<f64>,
}

impl Pca {
    /// Top-`d` principal directions of the rows of `data`.
    ///
    /// Each component is signed so that its largest-magnitude entry is
    /// positive, which makes the result independent of the eigensolver's
    /// sign choices.
    pub fn fit(data: &DMatrix<f64>, d: usize) -> Result<Self> {
        let (n, p) = data.shape();
        if d == 0 || d > n.min(p) || n <= d {
            return Err(Error::InvalidArgument(format!(
                "cannot extract {d} components from {n} samples of dimension {p}"
            )));
        }
        let mean = DVector::from_fn(p, |j, _| data.column(j).mean());
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.tr_mul(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut components = DMatrix::zeros(p, d);
        let mut explained = Vec::with_capacity(d);
        for (c, &k) in order.iter().take(d).enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.neg_mut();
            }
            components.set_column(c, &v);
            explained.push(if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 });
        }
        Ok(Self {
            mean,
            components,
            explained,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn original_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Orthonormal components, one per column (`P x d`).
    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.original_dim(), x.len())?;
        let centered = DVector::from_column_slice(x) - &self.mean;
        Ok(self.components.tr_mul(&centered).iter().copied().collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.latent_dim(), z.len())?;
        let x = &self.components * DVector::from_column_slice(z) + &self.mean;
        Ok(x.iter().copied().collect())
    }

    /// Projects every row.
    pub fn project_rows(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.original_dim(), data.ncols())?;
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.components)
    }

    /// Reconstructs every row.
    pub fn reconstruct_rows(&self, latent: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.latent_dim(), latent.ncols())?;
        let mut out = latent * self.components.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }
}

fn rows_at(traj: &Trajectory, eval_times: &[f64], what: &str) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(eval_times.len(), traj.dim());
    for (r, t) in eval_times.iter().enumerate() {
        let i = traj
            .times()
            .iter()
            .position(|s| s == t)
            .ok_or_else(|| Error::InvalidArgument(format!("{what} has no sample at t = {t}")))?;
        out.set_row(r, &traj.states().row(i));
    }
    Ok(out)
}

/// Per-dimension squared errors at `eval_times`, in the original space.
fn squared_errors(pred: &Trajectory, truth: &Trajectory, eval_times: &[f64], pca: Option<&Pca>) -> Result<DMatrix<f64>> {
    if eval_times.is_empty() {
        return Err(Error::InvalidArgument("no evaluation times for RMSE".into()));
    }
    let mut p = rows_at(pred, eval_times, "prediction")?;
    if let Some(pca) = pca {
        p = pca.reconstruct_rows(&p)?;
    }
    let t = rows_at(truth, eval_times, "reference")?;
    check_dim(t.ncols(), p.ncols())?;
    Ok((p - t).map(|e| e * e))
}

/// Root mean squared error over all entries at `eval_times`. With a PCA,
/// `pred` is latent and is reconstructed before comparison.
pub fn rmse(pred: &Trajectory, truth: &Trajectory, eval_times: &[f64], pca: Option<&Pca>) -> Result<f64> {
    let sq = squared_errors(pred, truth, eval_times, pca)?;
    Ok((sq.sum() / sq.len() as f64).sqrt())
}

/// Like [`rmse`], one value per original dimension.
pub fn rmse_per_dimension(pred: &Trajectory, truth: &Trajectory, eval_times: &[f64], pca: Option<&Pca>) -> Result<Vec<f64>> {
    let sq = squared_errors(pred, truth, eval_times, pca)?;
    Ok(sq.column_iter().map(|c| (c.sum() / c.len() as f64).sqrt()).collect())
}

/// RMSE between two equally shaped state matrices.
pub fn rmse_matrix(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    check_dim(truth.nrows(), pred.nrows())?;
    check_dim(truth.ncols(), pred.ncols())?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("RMSE of an empty matrix".into()));
    }
    Ok(((pred - truth).norm_squared() / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// Train on the first half in time, predict the second half.
    Forecast,
    /// Remove a centered block of 20% of the frames and predict it.
    Impute,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forecast => "forecast",
            Self::Impute => "impute",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forecast" => Ok(Self::Forecast),
            "impute" => Ok(Self::Impute),
            _ => Err(Error::InvalidArgument(format!("unknown experiment {s:?}, expected forecast or impute"))),
        }
    }
}

/// Fraction of frames removed by the imputation experiment.
pub const IMPUTE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fit: FitConfig,
    /// Inducing points per latent dimension.
    pub grid_count: usize,
    /// Grid padding as a fraction of the training range.
    pub grid_margin: f64,
    /// Isotropic lengthscale candidates; more than one triggers selection.
    pub lengthscales: Vec<f64>,
    /// Latent dimension, 0 disables PCA.
    pub pca_dim: usize,
    /// Keep every k-th frame; 1 keeps all.
    pub downsample: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            grid_count: 5,
            grid_margin: 0.1,
            lengthscales: vec![1.0],
            pca_dim: 0,
            downsample: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    /// Observations after downsampling, times shifted to start at 0.
    pub observed: Trajectory,
    /// Indices of `observed` used for training.
    pub train_rows: Vec<usize>,
    /// Indices of `observed` that are scored.
    pub test_rows: Vec<usize>,
    pub pca: Option<Pca>,
    pub lengthscale: f64,
    pub model: FittedModel,
    pub diagnostics: FitDiagnostics,
    /// Mean prediction at every observed time, in the original space.
    pub prediction: Trajectory,
    pub rmse: f64,
    pub rmse_per_dimension: Vec<f64>,
}

impl ExperimentReport {
    pub fn test_times(&self) -> Vec<f64> {
        self.test_rows.iter().map(|&i| self.observed.times()[i]).collect()
    }

    /// Key/value summary suitable for a text report.
    pub fn summary(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("experiment".to_string(), self.kind.name().to_string()),
            ("frames".into(), self.observed.len().to_string()),
            ("dimension".into(), self.observed.dim().to_string()),
            ("train_frames".into(), self.train_rows.len().to_string()),
            ("test_frames".into(), self.test_rows.len().to_string()),
            (
                "latent_dimension".into(),
                self.pca.as_ref().map_or(0, Pca::latent_dim).to_string(),
            ),
            ("lengthscale".into(), self.lengthscale.to_string()),
            ("rmse".into(), self.rmse.to_string()),
        ];
        for (j, r) in self.rmse_per_dimension.iter().enumerate() {
            out.push((format!("rmse_x{}", j + 1), r.to_string()));
        }
        if let Some(pca) = &self.pca {
            for (j, r) in pca.explained_variance_ratio().iter().enumerate() {
                out.push((format!("explained_variance_pc{}", j + 1), r.to_string()));
            }
        }
        out.extend(fit_summary(&self.model, &self.diagnostics));
        out
    }
}

/// Key/value description of a fit.
pub fn fit_summary(model: &FittedModel, diag: &FitDiagnostics) -> Vec<(String, String)> {
    let mut out = vec![
        ("log_posterior".to_string(), diag.best_value().to_string()),
        ("init_log_posterior".into(), diag.init_value.to_string()),
        ("init_scale".into(), diag.init_scale.to_string()),
        ("restarts".into(), diag.restarts.len().to_string()),
        ("failed_restarts".into(), diag.failures().to_string()),
        ("best_restart".into(), diag.best_restart.to_string()),
        ("sigma_f".into(), model.params.log_sigma_f.exp().to_string()),
    ];
    for (j, w) in model.noise_std().iter().enumerate() {
        out.push((format!("noise_std_x{}", j + 1), w.to_string()));
    }
    for r in &diag.restarts {
        let value = r.final_value.map_or_else(|| "failed".to_string(), |v| v.to_string());
        let status = r.status.map_or_else(|| r.error.clone().unwrap_or_default(), |s| s.to_string());
        out.push((
            format!("restart_{}", r.index),
            format!("{value} ({status}, {} iterations)", r.iterations),
        ));
    }
    out
}

/// Splits `n` frames into training and test rows.
pub fn experiment_split(times: &[f64], kind: ExperimentKind) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = times.len();
    let (train, test): (Vec<usize>, Vec<usize>) = match kind {
        ExperimentKind::Forecast => {
            let mid = times[0] + 0.5 * (times[n - 1] - times[0]);
            (0..n).partition(|&i| times[i] <= mid)
        }
        ExperimentKind::Impute => {
            let removed = (IMPUTE_FRACTION * n as f64).round() as usize;
            let start = (n - removed) / 2;
            (0..n).partition(|&i| i < start || i >= start + removed)
        }
    };
    if train.len() < 2 || test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} frames are too few for a {} experiment",
            n,
            kind.name()
        )));
    }
    Ok((train, test))
}

/// Runs a forecasting or imputation experiment on one series.
///
/// The series is downsampled and shifted to start at `t = 0`. With PCA the
/// projection is learned from the training frames only, the model is fitted
/// in the latent space, and predictions are reconstructed before scoring.
pub fn run_experiment(series: &Trajectory, kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.downsample == 0 {
        return Err(Error::InvalidArgument("downsample factor must be at least 1".into()));
    }
    if cfg.grid_count < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 points per dimension".into()));
    }
    let observed = series.select(|i| i % cfg.downsample == 0).shifted(series.times()[0]);
    let (train_rows, test_rows) = experiment_split(observed.times(), kind)?;

    let train_observed = observed.select(|i| train_rows.binary_search(&i).is_ok());
    let pca = match cfg.pca_dim {
        0 => None,
        d => Some(Pca::fit(train_observed.states(), d)?),
    };
    let train = match &pca {
        Some(p) => Trajectory::new(train_observed.times().to_vec(), p.project_rows(train_observed.states())?)?,
        None => train_observed,
    };
    let data = Dataset::single(train.clone())?;
    let grid = GridSpec::covering(train.states(), cfg.grid_count, cfg.grid_margin)?;
    let lengthscale = select_lengthscale(&data, &grid, &cfg.lengthscales, &cfg.fit)?.best;
    let fitted = fit(&data, &grid, &vec![lengthscale; train.dim()], &cfg.fit)?;

    let latent_pred = fitted.model.predict(observed.times(), None)?.trajectory;
    let test_times: Vec<f64> = test_rows.iter().map(|&i| observed.times()[i]).collect();
    let rmse_total = rmse(&latent_pred, &observed, &test_times, pca.as_ref())?;
    let per_dim = rmse_per_dimension(&latent_pred, &observed, &test_times, pca.as_ref())?;
    let prediction = match &pca {
        Some(p) => Trajectory::new(latent_pred.times().to_vec(), p.reconstruct_rows(latent_pred.states())?)?,
        None => latent_pred,
    };
    Ok(ExperimentReport {
        kind,
        observed,
        train_rows,
        test_rows,
        pca,
        lengthscale,
        model: fitted.model,
        diagnostics: fitted.diagnostics,
        prediction,
        rmse: rmse_total,
        rmse_per_dimension: per_dim,
    })
}

pub fn run_forecast_experiment(series: &Trajectory, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(series, ExperimentKind::Forecast, cfg)
}

pub fn run_imputation_experiment(series: &Trajectory, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(series, ExperimentKind::Impute, cfg)
}

/// Van der Pol oscillator with a third coordinate relaxing towards `x₁`.
#[derive(Debug, Clone, Copy)]
pub struct LatentOscillator;

impl VectorField for LatentOscillator {
    fn dim(&self) -> usize {
        3
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let [a, b] = BenchmarkSystem::VanDerPol.eval([x[0], x[1]]);
        out[0] = a;
        out[1] = b;
        out[2] = x[0] - x[2];
    }
}

/// Time [`lifted_oscillator`] lets the latent oscillator settle before recording.
pub const LATENT_BURN_IN: f64 = 30.0;

/// High-dimensional series built from a latent oscillator.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSeries {
    pub latent: Trajectory,
    /// `3 x P` lifting map with `N(0, 1/P)` entries.
    pub lift: DMatrix<f64>,
    /// Noise-free lifted series.
    pub clean: Trajectory,
    pub observed: Trajectory,
}

/// Lifts `n` frames of [`LatentOscillator`] over `[0, t_end]`, recorded
/// after a burn-in from `(2, 0, 0)`, to `p` dimensions and adds
/// `N(0, noise²)` noise.
pub fn lifted_oscillator(n: usize, t_end: f64, p: usize, noise: f64, seed: u64) -> Result<LiftedSeries> {
    if p < 3 {
        return Err(Error::InvalidArgument("lifted dimension must be at least 3".into()));
    }
    let times = linspace(t_end, n);
    let solver = SolverConfig::default();
    // start on the attracting cycle so every recorded cycle looks alike
    let settled = integrate(&LatentOscillator, &[2.0, 0.0, 0.0], &[LATENT_BURN_IN], &solver)?.state(0);
    let latent = integrate(&LatentOscillator, &settled, &times, &solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (p as f64).sqrt();
    let lift = DMatrix::from_fn(3, p, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let clean = Trajectory::new(times, latent.states() * &lift)?;
    let observed = add_noise(&clean, noise, seed.wrapping_add(1))?;
    Ok(LiftedSeries {
        latent,
        lift,
        clean,
        observed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> SolverConfig {
        SolverConfig::with_tolerances(1e-9, 1e-11)
    }

    #[test]
    fn fixed_points_and_substitution() {
        assert_eq!(BenchmarkSystem::VanDerPol.eval([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(BenchmarkSystem::LotkaVolterra.eval([3.0, 1.5]), [0.0, 0.0]);
        let f = BenchmarkSystem::FitzHughNagumo.eval([1.0, 0.0]);
        assert!((f[0] - 2.0).abs() < 1e-15);
        assert!((f[1] + 2.8 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fields_match_independent_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x1: f64 = rng.random_range(-3.0..3.0);
            let x2: f64 = rng.random_range(-3.0..3.0);
            assert_eq!(eval_true_field(BenchmarkSystem::VanDerPol, &[x1, x2]).unwrap(), [x2, (1.0 - x1 * x1) * x2 - x1]);
            assert_eq!(
                eval_true_field(BenchmarkSystem::FitzHughNagumo, &[x1, x2]).unwrap(),
                [3.0 * (x1 - x1.powi(3) / 3.0 + x2), (0.2 - 3.0 * x1 - 0.2 * x2) / 3.0]
            );
            assert_eq!(
                eval_true_field(BenchmarkSystem::LotkaVolterra, &[x1, x2]).unwrap(),
                [1.5 * x1 - x1 * x2, -3.0 * x2 + x1 * x2]
            );
        }
        assert!(eval_true_field(BenchmarkSystem::VanDerPol, &[1.0]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in BenchmarkSystem::ALL {
            assert_eq!(s.name().parse::<BenchmarkSystem>().unwrap(), s);
        }
        let err = "duffing".parse::<BenchmarkSystem>().unwrap_err().to_string();
        assert!(err.contains("vdp, fhn, lv"));
    }

    #[test]
    fn van_der_pol_cycle_closes() {
        let sys = BenchmarkSystem::VanDerPol;
        let x0 = sys.initial_state();
        let period = sys.period(x0, &cfg()).unwrap();
        // the limit cycle period for unit damping
        assert!((period - 6.6633).abs() < 0.01, "{period}");
        let tr = simulate_benchmark(sys, &x0, &[period], &cfg()).unwrap();
        let end = tr.state(0);
        let dist = ((end[0] - 2.0).powi(2) + end[1].powi(2)).sqrt();
        assert!(dist < 0.05 * 2.0, "{end:?}");
    }

    #[test]
    fn lotka_volterra_stays_positive_and_conserves() {
        let sys = BenchmarkSystem::LotkaVolterra;
        let times = linspace(20.0, 2001);
        let tr = simulate_benchmark(sys, &[1.0, 2.0], &times, &cfg()).unwrap();
        assert!(tr.states().iter().all(|v| *v > 0.0));
        let h = |x: f64, y: f64| x - 3.0 * x.ln() + y - 1.5 * y.ln();
        let h0 = h(1.0, 2.0);
        for r in tr.states().row_iter() {
            assert!((h(r[0], r[1]) - h0).abs() < 1e-6);
        }
        let p = sys.period(sys.initial_state(), &cfg()).unwrap();
        let end = simulate_benchmark(sys, &sys.initial_state(), &[p], &cfg()).unwrap().state(0);
        assert!((end[0] - 5.0).abs() < 0.05 && (end[1] - 1.0).abs() < 0.05, "{end:?}");
    }

    #[test]
    fn noise_statistics() {
        let times = linspace(1.0, 5000);
        let clean = Trajectory::new(times, DMatrix::from_element(5000, 2, 1.0)).unwrap();
        assert_eq!(add_noise(&clean, 0.0, 1).unwrap(), clean);
        let noisy = add_noise(&clean, 0.1, 1).unwrap();
        assert_eq!(noisy, add_noise(&clean, 0.1, 1).unwrap());
        let diff = noisy.states() - clean.states();
        let mean = diff.mean();
        let sd = (diff.map(|e| (e - mean).powi(2)).sum() / (diff.len() - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.003, "{sd}");
        assert!(add_noise(&clean, -1.0, 1).is_err());
    }

    #[test]
    fn rmse_examples() {
        let t = Trajectory::new(vec![0.0, 1.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(rmse(&t, &t, &[0.0, 1.0], None).unwrap(), 0.0);
        let shifted = Trajectory::new(vec![0.0, 1.0], t.states().add_scalar(-0.7)).unwrap();
        assert!((rmse(&shifted, &t, &[0.0, 1.0], None).unwrap() - 0.7).abs() < 1e-15);
        let other = Trajectory::new(vec![0.0, 1.0], DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 5.0, 4.0])).unwrap();
        assert!((rmse(&other, &t, &[0.0, 1.0], None).unwrap() - 1.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&t, &t, &[], None).is_err());
        assert!(rmse(&t, &t, &[0.5], None).is_err());
        assert_eq!(rmse_per_dimension(&other, &t, &[0.0, 1.0], None).unwrap(), vec![(2.5f64).sqrt(), (0.5f64).sqrt()]);
    }

    #[test]
    fn pca_recovers_embedded_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = DMatrix::from_fn(3, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let latent = DMatrix::from_fn(40, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = latent * &basis;
        let pca = Pca::fit(&data, 3).unwrap();
        let back = pca.reconstruct_rows(&pca.project_rows(&data).unwrap()).unwrap();
        assert!((back - &data).amax() < 1e-10);
        let gram = pca.components().tr_mul(pca.components());
        assert!((gram - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
        let row: Vec<f64> = data.row(0).iter().copied().collect();
        let z = pca.project(&row).unwrap();
        let z2 = pca.project(&pca.reconstruct(&z).unwrap()).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(Pca::fit(&data, 9).is_err());
        assert!(Pca::fit(&data, 0).is_err());
    }

    #[test]
    fn pca_matches_direct_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = DMatrix::from_fn(30, 5, |_, j| (j + 1) as f64 * rng.sample::<f64, _>(StandardNormal));
        let pca = Pca::fit(&data, 5).unwrap();
        let ratios = pca.explained_variance_ratio();
        assert!(ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(ratios.iter().sum::<f64>() <= 1.0 + 1e-12);
        // Rayleigh quotients of the centered covariance reproduce the ratios
        let mean = DVector::from_fn(5, |j, _| data.column(j).mean());
        let mut c = data.clone();
        for mut r in c.row_iter_mut() {
            r -= mean.transpose();
        }
        let cov = c.tr_mul(&c) / 29.0;
        let total = cov.trace();
        for k in 0..5 {
            let v = pca.components().column(k);
            let q = (v.transpose() * &cov * v)[(0, 0)];
            assert!((q / total - ratios[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn reconstruction_error_shrinks_with_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = DMatrix::from_fn(25, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut last = f64::INFINITY;
        for d in 1..=6 {
            let pca = Pca::fit(&data, d).unwrap();
            let back = pca.reconstruct_rows(&pca.project_rows(&data).unwrap()).unwrap();
            let err = (back - &data).norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn splits() {
        let times = linspace(9.0, 10);
        let (train, test) = experiment_split(&times, ExperimentKind::Forecast).unwrap();
        assert_eq!(train, vec![0, 1, 2, 3, 4]);
        assert_eq!(test, vec![5, 6, 7, 8, 9]);
        let times = linspace(93.0, 94);
        let (train, test) = experiment_split(&times, ExperimentKind::Impute).unwrap();
        assert_eq!(test.len(), 19);
        assert_eq!(test[0], 37);
        assert_eq!(train.len(), 75);
        assert!(experiment_split(&[0.0, 1.0], ExperimentKind::Forecast).is_err());
    }

    #[test]
    fn lifted_series_shapes() {
        let s = lifted_oscillator(40, 6.0, 50, 0.05, 3).unwrap();
        assert_eq!(s.observed.dim(), 50);
        assert_eq!(s.clean.len(), 40);
        assert_eq!(s, lifted_oscillator(40, 6.0, 50, 0.05, 3).unwrap());
        let pca = Pca::fit(s.clean.states(), 3).unwrap();
        let back = pca.reconstruct_rows(&pca.project_rows(s.clean.states()).unwrap()).unwrap();
        assert!((back - s.clean.states()).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed in any::<u64>(), d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = DMatrix::from_fn(12, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let pca = Pca::fit(&data, d).unwrap();
            let z = pca.project_rows(&data).unwrap();
            let z2 = pca.project_rows(&pca.reconstruct_rows(&z).unwrap()).unwrap();
            prop_assert!((z - z2).amax() < 1e-10);
        }
    }
}

//! The probabilistic model: parameters, log posterior, its gradient,
//! initialization, MAP fitting with restarts, lengthscale selection and
//! prediction.
//!
//! With `u = vec(U)`, `U = L Ũ` and residuals `r_ij = y_ij - x_j(t_i)`, the
//! log posterior (additive `2π` constants dropped) is
//!
//! ```text
//! log L = -½ ‖vec(Ũ)‖² - ½ log|K(Z,Z)| - ½ Σ_i Σ_j r_ij² / ω_j² - N Σ_j log ω_j
//! ```
//!
//! where `K(Z,Z) = k(Z,Z) ⊗ I_D`, so `log|K(Z,Z)| = D log|k(Z,Z)|`. The first
//! term equals `-½ uᵀ K(Z,Z)^{-1} u`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::field::{make_grid, whiten, GridSpec, InducingSet};
use crate::kernel::{kernel_matrix, robust_cholesky_named, KernelParams};
use crate::odeint::{
    integrate, integrate_with_sensitivities, integrate_with_whitened_sensitivities, SensitivityState,
    SolverConfig, Trajectory,
};
use crate::optim::{maximize, OptimConfig, Status};

/// Step in `σ_f` of the forward difference used for its gradient.
pub const SIGMA_F_STEP: f64 = 1e-4;

/// Default grid of isotropic lengthscales for cross-validation.
pub const DEFAULT_LENGTHSCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

/// Default candidate multipliers for the initial inducing vectors.
pub const DEFAULT_INIT_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// One or more observed series of the same system.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    series: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(series: Vec<Trajectory>) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no series".into()))?;
        let d = first.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("series have no value columns".into()));
        }
        for (s, tr) in series.iter().enumerate() {
            check_dim(d, tr.dim())?;
            if tr.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "series {s} has {} observations, at least 2 are needed",
                    tr.len()
                )));
            }
            if tr.times()[0] < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "series {s} starts at t = {}; observation times must be >= 0",
                    tr.times()[0]
                )));
            }
        }
        Ok(Self { series })
    }

    pub fn single(series: Trajectory) -> Result<Self> {
        Self::new(vec![series])
    }

    pub fn series(&self) -> &[Trajectory] {
        &self.series
    }

    pub fn dim(&self) -> usize {
        self.series[0].dim()
    }

    /// Total number of observed states `N` across all series.
    pub fn observation_count(&self) -> usize {
        self.series.iter().map(Trajectory::len).sum()
    }

    /// All observed states stacked, one per row.
    pub fn all_states(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(self.observation_count(), d);
        let mut r = 0;
        for tr in &self.series {
            out.rows_mut(r, tr.len()).copy_from(tr.states());
            r += tr.len();
        }
        out
    }
}

/// Everything the optimizer moves, plus the fixed lengthscales.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One initial state per series.
    pub initial_states: Vec<Vec<f64>>,
    /// Whitened inducing vectors `Ũ`, `M x D`.
    pub whitened: DMatrix<f64>,
    pub log_sigma_f: f64,
    pub lengthscales: Vec<f64>,
    /// Log noise standard deviations `log ω_j`.
    pub log_noise: Vec<f64>,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.whitened.ncols()
    }

    pub fn inducing_count(&self) -> usize {
        self.whitened.nrows()
    }

    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::from_log(self.log_sigma_f, self.lengthscales.clone())
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.log_noise.iter().map(|v| v.exp()).collect()
    }

    pub fn inducing(&self, locations: &DMatrix<f64>) -> Result<InducingSet> {
        InducingSet::from_whitened(locations.clone(), self.whitened.clone(), self.kernel()?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_dim(d, self.lengthscales.len())?;
        check_dim(d, self.log_noise.len())?;
        for x0 in &self.initial_states {
            check_dim(d, x0.len())?;
        }
        let finite = self.initial_states.iter().flatten().all(|v| v.is_finite())
            && self.whitened.iter().all(|v| v.is_finite())
            && self.log_sigma_f.is_finite()
            && self.log_noise.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("model parameters must be finite".into()));
        }
        Ok(())
    }

    /// Length of [`ModelParams::flatten`].
    pub fn flat_len(&self) -> usize {
        let d = self.dim();
        self.initial_states.len() * d + self.whitened.len() + 1 + d
    }

    /// `[x0 of each series | vec(Ũ) column-major | log σ_f | log ω]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for x0 in &self.initial_states {
            out.extend_from_slice(x0);
        }
        out.extend_from_slice(self.whitened.as_slice());
        out.push(self.log_sigma_f);
        out.extend_from_slice(&self.log_noise);
        out
    }

    /// Inverse of [`ModelParams::flatten`], taking shapes and lengthscales from `self`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        check_dim(self.flat_len(), flat.len())?;
        let d = self.dim();
        let s = self.initial_states.len();
        let mut at = 0;
        let initial_states = (0..s)
            .map(|_| {
                let v = flat[at..at + d].to_vec();
                at += d;
                v
            })
            .collect();
        let wl = self.whitened.len();
        let whitened = DMatrix::from_column_slice(self.whitened.nrows(), d, &flat[at..at + wl]);
        at += wl;
        let log_sigma_f = flat[at];
        at += 1;
        let log_noise = flat[at..at + d].to_vec();
        Ok(ModelParams {
            initial_states,
            whitened,
            log_sigma_f,
            lengthscales: self.lengthscales.clone(),
            log_noise,
        })
    }
}

/// The individual terms of the log posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorTerms {
    /// `-½ ‖vec(Ũ)‖²`.
    pub prior: f64,
    /// `-½ D log|k(Z,Z)|`.
    pub log_det: f64,
    /// `-½ Σ r² / ω²`.
    pub fit: f64,
    /// `-N Σ_j log ω_j`.
    pub noise: f64,
}

impl PosteriorTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.log_det + self.fit + self.noise
    }

    pub fn value(&self, form: PosteriorForm) -> f64 {
        match form {
            PosteriorForm::Explicit => self.total(),
            PosteriorForm::Whitened => self.prior + self.fit + self.noise,
        }
    }
}

/// Which density over the free parameters is evaluated.
///
/// `Explicit` is the posterior written in terms of `u`, including
/// `-½ log|K(Z,Z)|`. `Whitened` is the density of the whitened vectors
/// `Ũ ~ N(0, I)`, where the change of variables `u = (L ⊗ I) vec(Ũ)` cancels
/// the log-determinant. Only the whitened form is bounded when `σ_f` is free
/// alongside `Ũ`: with `Ũ` held fixed, the explicit form grows like
/// `-D M log σ_f` as `σ_f → 0`. Fitting therefore maximizes `Whitened`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorForm {
    Explicit,
    Whitened,
}

fn check_problem(params: &ModelParams, data: &Dataset, locations: &DMatrix<f64>) -> Result<()> {
    params.validate()?;
    check_dim(data.dim(), params.dim())?;
    check_dim(locations.ncols(), params.dim())?;
    check_dim(locations.nrows(), params.inducing_count())?;
    check_dim(data.series().len(), params.initial_states.len())
}

fn is_integration_failure(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::StepBudget { .. })
}

/// Noise-independent parts of the posterior for a given field.
fn prior_terms(params: &ModelParams, field: &InducingSet) -> (f64, f64) {
    let prior = -0.5 * params.whitened.norm_squared();
    let log_det = -0.5 * params.dim() as f64 * field.factor().log_det();
    (prior, log_det)
}

/// Per-dimension sums of squared residuals and the observation count `N`.
fn residual_sums(data: &Dataset, trajectories: &[Trajectory]) -> (Vec<f64>, usize) {
    let d = data.dim();
    let mut ss = vec![0.0; d];
    for (obs, sim) in data.series().iter().zip(trajectories) {
        for i in 0..obs.len() {
            for j in 0..d {
                let r = obs.states()[(i, j)] - sim.states()[(i, j)];
                ss[j] += r * r;
            }
        }
    }
    (ss, data.observation_count())
}

fn likelihood_terms(log_noise: &[f64], ss: &[f64], n: usize) -> (f64, f64) {
    let mut fit = 0.0;
    let mut noise = 0.0;
    for (lw, s) in log_noise.iter().zip(ss) {
        fit -= 0.5 * s * (-2.0 * lw).exp();
        noise -= n as f64 * lw;
    }
    (fit, noise)
}

/// Forward-simulates every series under `field`; `None` when integration fails.
fn simulate_all(
    field: &InducingSet,
    params: &ModelParams,
    data: &Dataset,
    cfg: &SolverConfig,
) -> Result<Option<Vec<Trajectory>>> {
    let mut out = Vec::with_capacity(data.series().len());
    for (obs, x0) in data.series().iter().zip(&params.initial_states) {
        match integrate(field, x0, obs.times(), cfg) {
            Ok(tr) => out.push(tr),
            Err(e) if is_integration_failure(&e) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(out))
}

/// All terms of the log posterior; `None` if forward simulation fails.
pub fn posterior_terms(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<Option<PosteriorTerms>> {
    check_problem(params, data, locations)?;
    let field = params.inducing(locations)?;
    let Some(trajectories) = simulate_all(&field, params, data, cfg)? else {
        return Ok(None);
    };
    let (prior, log_det) = prior_terms(params, &field);
    let (ss, n) = residual_sums(data, &trajectories);
    let (fit, noise) = likelihood_terms(&params.log_noise, &ss, n);
    Ok(Some(PosteriorTerms {
        prior,
        log_det,
        fit,
        noise,
    }))
}

/// Log posterior of `params` in the given form; `-∞` when forward simulation diverges.
pub fn posterior_value(
    form: PosteriorForm,
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(posterior_terms(params, data, locations, cfg)?.map_or(f64::NEG_INFINITY, |t| t.value(form)))
}

/// Explicit log posterior of `params`; `-∞` when forward simulation diverges.
pub fn log_posterior(params: &ModelParams, data: &Dataset, locations: &DMatrix<f64>, cfg: &SolverConfig) -> Result<f64> {
    posterior_value(PosteriorForm::Explicit, params, data, locations, cfg)
}

/// Whitened log posterior, the objective maximized by [`fit`].
pub fn whitened_log_posterior(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<f64> {
    posterior_value(PosteriorForm::Whitened, params, data, locations, cfg)
}

/// Data-term gradient pieces from one sensitivity integration per series.
struct DataGradient {
    /// `Σ r_ij / ω_j² ∂x_j(t_i)/∂u_k`, reshaped `M x D`.
    vectors: DMatrix<f64>,
    initial: Vec<Vec<f64>>,
    /// Per-dimension sums of squared residuals.
    ss: Vec<f64>,
}

fn data_gradient(
    field: &InducingSet,
    params: &ModelParams,
    data: &Dataset,
    cfg: &SolverConfig,
    whitened: bool,
) -> Result<Option<DataGradient>> {
    let d = params.dim();
    let m = params.inducing_count();
    let inv_var: Vec<f64> = params.log_noise.iter().map(|lw| (-2.0 * lw).exp()).collect();
    let mut gu = DVector::zeros(m * d);
    let mut initial = Vec::with_capacity(data.series().len());
    let mut ss = vec![0.0; d];
    for (obs, x0) in data.series().iter().zip(&params.initial_states) {
        let run = if whitened {
            integrate_with_whitened_sensitivities(field, x0, obs.times(), cfg)
        } else {
            integrate_with_sensitivities(field, x0, obs.times(), cfg)
        };
        let (sim, sens): (Trajectory, Vec<SensitivityState>) = match run {
            Ok(v) => v,
            Err(e) if is_integration_failure(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut gx0 = DVector::zeros(d);
        for (i, s) in sens.iter().enumerate() {
            let mut weighted = DVector::zeros(d);
            for j in 0..d {
                let r = obs.states()[(i, j)] - sim.states()[(i, j)];
                ss[j] += r * r;
                weighted[j] = r * inv_var[j];
            }
            gu += s.wrt_vectors.tr_mul(&weighted);
            gx0 += s.wrt_initial.tr_mul(&weighted);
        }
        initial.push(gx0.iter().copied().collect());
    }
    Ok(Some(DataGradient {
        vectors: DMatrix::from_column_slice(m, d, gu.as_slice()),
        initial,
        ss,
    }))
}

/// Explicit log posterior and its gradient with respect to
/// [`ModelParams::flatten`].
///
/// Inducing-vector and initial-state components come from forward
/// sensitivities, the noise components are analytic, and the `log σ_f`
/// component is a forward difference with step [`SIGMA_F_STEP`] in `σ_f`.
/// The returned value is the one [`log_posterior`] reports. When
/// integration fails the value is `-∞` and the gradient is zero.
pub fn log_posterior_gradient(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    posterior_gradient(PosteriorForm::Explicit, params, data, locations, cfg)
}

/// Like [`log_posterior_gradient`] for [`whitened_log_posterior`].
pub fn whitened_log_posterior_gradient(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    posterior_gradient(PosteriorForm::Whitened, params, data, locations, cfg)
}

/// Value and gradient of the log posterior in the given form.
pub fn posterior_gradient(
    form: PosteriorForm,
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    check_problem(params, data, locations)?;
    let failed = || Ok((f64::NEG_INFINITY, vec![0.0; params.flat_len()]));
    let value = posterior_value(form, params, data, locations, cfg)?;
    if !value.is_finite() {
        return failed();
    }
    let field = params.inducing(locations)?;
    let Some(dg) = data_gradient(&field, params, data, cfg, false)? else {
        return failed();
    };

    let d = params.dim();
    let n = data.observation_count() as f64;
    let mut grad = Vec::with_capacity(params.flat_len());
    for g in &dg.initial {
        grad.extend_from_slice(g);
    }
    // ∇_U = data term - K^{-1} u, then ∇_Ũ = Lᵀ ∇_U
    let grad_u = &dg.vectors - field.alpha();
    let grad_w = field.factor().l().tr_mul(&grad_u);
    grad.extend_from_slice(grad_w.as_slice());

    let sigma_f = params.log_sigma_f.exp();
    let mut bumped = params.clone();
    bumped.log_sigma_f = (sigma_f + SIGMA_F_STEP).ln();
    let forward = posterior_value(form, &bumped, data, locations, cfg)?;
    let d_sigma = if forward.is_finite() {
        (forward - value) / SIGMA_F_STEP
    } else {
        bumped.log_sigma_f = (sigma_f - SIGMA_F_STEP).max(0.5 * sigma_f).ln();
        let step = sigma_f - bumped.log_sigma_f.exp();
        let backward = posterior_value(form, &bumped, data, locations, cfg)?;
        if !backward.is_finite() {
            return failed();
        }
        (value - backward) / step
    };
    grad.push(d_sigma * sigma_f);

    for j in 0..d {
        let inv_var = (-2.0 * params.log_noise[j]).exp();
        // (1/ω³ Σ r² - N/ω) · ω
        grad.push(dg.ss[j] * inv_var - n);
    }
    Ok((value, grad))
}

/// Gradient of the log posterior with respect to the unwhitened inducing
/// vectors `U` (kernel parameters held fixed), `M x D`.
pub fn gradient_wrt_vectors(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<Option<DMatrix<f64>>> {
    check_problem(params, data, locations)?;
    let field = params.inducing(locations)?;
    Ok(data_gradient(&field, params, data, cfg, false)?.map(|dg| dg.vectors - field.alpha()))
}

/// Gradient with respect to `Ũ` obtained by integrating sensitivities in the
/// whitened coordinates directly, with the prior contributing `-Ũ`.
pub fn gradient_wrt_whitened(
    params: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<Option<DMatrix<f64>>> {
    check_problem(params, data, locations)?;
    let field = params.inducing(locations)?;
    Ok(data_gradient(&field, params, data, cfg, true)?.map(|dg| dg.vectors - &params.whitened))
}

/// Starting point produced by [`init_inducing`].
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub params: ModelParams,
    /// Selected multiplier `c` (zero when every candidate diverged).
    pub scale: f64,
    /// Whitened log posterior at the initialization.
    pub objective: f64,
}

/// Empirical slopes of every series.
struct Slopes {
    /// Midpoints `(y_i + y_{i-1}) / 2`, where the difference quotient is a
    /// second-order estimate of the derivative.
    anchors: DMatrix<f64>,
    /// `(y_i - y_{i-1}) / (t_i - t_{i-1})`.
    values: DMatrix<f64>,
    /// Estimated noise variance of a single slope entry.
    noise_var: f64,
}

/// Successive slopes share one observation, so for white observation noise
/// `var(s_i - s_{i-1}) = 3 var(s_i)`; the mean squared successive difference
/// over three estimates the slope noise (plus a curvature bias that only
/// makes the initial field smoother).
fn empirical_slopes(data: &Dataset) -> Slopes {
    let d = data.dim();
    let rows: usize = data.series().iter().map(|s| s.len() - 1).sum();
    let mut anchors = DMatrix::zeros(rows, d);
    let mut values = DMatrix::zeros(rows, d);
    let mut diff_ss = 0.0;
    let mut diff_count = 0usize;
    let mut r = 0;
    for s in data.series() {
        for i in 1..s.len() {
            let dt = s.times()[i] - s.times()[i - 1];
            for j in 0..d {
                anchors[(r, j)] = 0.5 * (s.states()[(i, j)] + s.states()[(i - 1, j)]);
                values[(r, j)] = (s.states()[(i, j)] - s.states()[(i - 1, j)]) / dt;
                if i > 1 {
                    diff_ss += (values[(r, j)] - values[(r - 1, j)]).powi(2);
                    diff_count += 1;
                }
            }
            r += 1;
        }
    }
    let noise_var = if diff_count > 0 { diff_ss / (3.0 * diff_count as f64) } else { 0.0 };
    Slopes {
        anchors,
        values,
        noise_var,
    }
}

/// Kernel regression of `values` at `points`, read off at `locations`:
/// `k(Z, Y) (k(Y, Y) + nugget I)^{-1} values`. A zero nugget interpolates.
pub fn condition_on(
    locations: &DMatrix<f64>,
    points: &DMatrix<f64>,
    values: &DMatrix<f64>,
    kernel: &KernelParams,
    nugget: f64,
) -> Result<DMatrix<f64>> {
    check_dim(points.nrows(), values.nrows())?;
    if !(nugget >= 0.0 && nugget.is_finite()) {
        return Err(Error::InvalidArgument(format!("nugget must be non-negative, got {nugget}")));
    }
    let mut kyy = kernel_matrix(points, points, kernel)?;
    for i in 0..kyy.nrows() {
        kyy[(i, i)] += nugget;
    }
    let factor = robust_cholesky_named(&kyy, "data kernel matrix k(Y,Y)")?;
    let kzy = kernel_matrix(locations, points, kernel)?;
    Ok(kzy * factor.solve(values))
}

/// Initial parameters: empirical slopes regressed onto the grid and scaled
/// by the best of `scales` under the whitened log posterior.
///
/// The regression nugget is the slope noise variance estimated from
/// successive slope differences; exact interpolation of noisy difference
/// quotients at nearby states produces wildly oscillating fields.
/// Initial states start at the first observation of each series, `σ_f` at
/// the RMS slope, and for each candidate scale the noise levels are set to
/// the RMS residual of the simulated trajectories (the noise maximizer for
/// that trajectory).
pub fn init_inducing(
    data: &Dataset,
    locations: &DMatrix<f64>,
    lengthscales: &[f64],
    scales: &[f64],
    cfg: &SolverConfig,
) -> Result<Initialization> {
    let d = data.dim();
    check_dim(d, locations.ncols())?;
    check_dim(d, lengthscales.len())?;
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no initialization scales given".into()));
    }
    let slopes = empirical_slopes(data);
    let rms_slope = (slopes.values.norm_squared() / slopes.values.len() as f64).sqrt();
    let sigma_f = if rms_slope.is_finite() && rms_slope > 1e-8 { rms_slope } else { 1.0 };
    let kernel = KernelParams::new(sigma_f, lengthscales.to_vec())?;
    let base = condition_on(locations, &slopes.anchors, &slopes.values, &kernel, slopes.noise_var)?;
    let zero_field = InducingSet::from_vectors(locations.clone(), DMatrix::zeros(locations.nrows(), d), kernel.clone())?;
    let base_white = whiten(&base, zero_field.factor())?;

    let initial_states: Vec<Vec<f64>> = data.series().iter().map(|s| s.state(0)).collect();
    let data_scale = data.all_states().abs().max().max(1.0);
    let noise_floor = 1e-6 * data_scale;

    let candidate = |c: f64| -> Result<Option<ModelParams>> {
        let mut p = ModelParams {
            initial_states: initial_states.clone(),
            whitened: &base_white * c,
            log_sigma_f: kernel.log_sigma_f(),
            lengthscales: lengthscales.to_vec(),
            log_noise: vec![0.0; d],
        };
        let field = p.inducing(locations)?;
        let Some(sims) = simulate_all(&field, &p, data, cfg)? else {
            return Ok(None);
        };
        let (ss, n) = residual_sums(data, &sims);
        p.log_noise = ss
            .iter()
            .map(|s| (s / n as f64).sqrt().max(noise_floor).ln())
            .collect();
        Ok(Some(p))
    };

    let mut best: Option<Initialization> = None;
    for &c in scales {
        let Some(p) = candidate(c)? else { continue };
        let value = whitened_log_posterior(&p, data, locations, cfg)?;
        if value.is_finite() && best.as_ref().is_none_or(|b| value > b.objective) {
            best = Some(Initialization {
                params: p,
                scale: c,
                objective: value,
            });
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            let p = candidate(0.0)?.ok_or(Error::Divergence { last_time: 0.0 })?;
            let value = whitened_log_posterior(&p, data, locations, cfg)?;
            Ok(Initialization {
                params: p,
                scale: 0.0,
                objective: value,
            })
        }
    }
}

/// Default solver tolerances while fitting. Values and gradients come from
/// separately step-controlled integrations, and at looser tolerances their
/// disagreement stalls the line search well before convergence.
pub const FIT_RTOL: f64 = 1e-8;
pub const FIT_ATOL: f64 = 1e-10;

/// Settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub restarts: usize,
    /// Standard deviation of the Gaussian perturbation added to `Ũ₀`.
    pub perturbation: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    pub solver: SolverConfig,
    pub init_scales: Vec<f64>,
    /// Run restarts on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 100,
            perturbation: 0.1,
            seed: 0x5EED,
            optim: OptimConfig::default(),
            solver: SolverConfig::with_tolerances(FIT_RTOL, FIT_ATOL),
            init_scales: DEFAULT_INIT_SCALES.to_vec(),
            parallel: true,
        }
    }
}

/// What happened in one restart. Values are of [`whitened_log_posterior`].
#[derive(Debug, Clone, PartialEq)]
pub struct RestartOutcome {
    pub index: usize,
    pub initial_value: f64,
    /// `None` when the restart failed.
    pub final_value: Option<f64>,
    pub status: Option<Status>,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    pub init_scale: f64,
    pub init_value: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

impl FitDiagnostics {
    pub fn failures(&self) -> usize {
        self.restarts.iter().filter(|r| r.final_value.is_none()).count()
    }

    pub fn best_value(&self) -> f64 {
        self.restarts[self.best_restart].final_value.unwrap_or(f64::NEG_INFINITY)
    }
}

/// A fitted model: grid, MAP parameters and the solver they were fitted with.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub locations: DMatrix<f64>,
    pub params: ModelParams,
    pub solver: SolverConfig,
}

/// Mean trajectory with the fitted per-dimension observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub trajectory: Trajectory,
    pub noise_std: Vec<f64>,
}

impl FittedModel {
    pub fn new(locations: DMatrix<f64>, params: ModelParams, solver: SolverConfig) -> Result<Self> {
        params.validate()?;
        check_dim(locations.ncols(), params.dim())?;
        check_dim(locations.nrows(), params.inducing_count())?;
        if params.initial_states.is_empty() {
            return Err(Error::InvalidArgument("model has no initial states".into()));
        }
        Ok(Self {
            locations,
            params,
            solver,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn inducing(&self) -> Result<InducingSet> {
        self.params.inducing(&self.locations)
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.params.noise_std()
    }

    pub fn log_posterior(&self, data: &Dataset) -> Result<f64> {
        log_posterior(&self.params, data, &self.locations, &self.solver)
    }

    /// The objective [`fit`] maximized, evaluated on `data`.
    pub fn whitened_log_posterior(&self, data: &Dataset) -> Result<f64> {
        whitened_log_posterior(&self.params, data, &self.locations, &self.solver)
    }

    /// Integrates the fitted field over `times` from `from_state`, or from the
    /// fitted initial state of the first series.
    pub fn predict(&self, times: &[f64], from_state: Option<&[f64]>) -> Result<Prediction> {
        let x0 = from_state.unwrap_or(&self.params.initial_states[0]);
        self.predict_from(times, x0)
    }

    /// Like [`FittedModel::predict`] from the fitted initial state of `series`.
    pub fn predict_series(&self, series: usize, times: &[f64]) -> Result<Prediction> {
        let x0 = self.params.initial_states.get(series).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "series {series} out of range, model has {}",
                self.params.initial_states.len()
            ))
        })?;
        self.predict_from(times, x0)
    }

    fn predict_from(&self, times: &[f64], x0: &[f64]) -> Result<Prediction> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("no prediction times given".into()));
        }
        let field = self.inducing()?;
        let trajectory = integrate(&field, x0, times, &self.solver)?;
        Ok(Prediction {
            trajectory,
            noise_std: self.noise_std(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub model: FittedModel,
    pub diagnostics: FitDiagnostics,
}

fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn run_restart(
    index: usize,
    init: &ModelParams,
    data: &Dataset,
    locations: &DMatrix<f64>,
    cfg: &FitConfig,
) -> (RestartOutcome, Option<ModelParams>) {
    let mut rng = restart_rng(cfg.seed, index);
    let mut start = init.clone();
    for v in start.whitened.iter_mut() {
        *v += cfg.perturbation * rng.sample::<f64, _>(StandardNormal);
    }
    let mut outcome = RestartOutcome {
        index,
        initial_value: f64::NEG_INFINITY,
        final_value: None,
        status: None,
        iterations: 0,
        error: None,
    };
    match whitened_log_posterior(&start, data, locations, &cfg.solver) {
        Ok(v) => outcome.initial_value = v,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return (outcome, None);
        }
    }
    let mut objective = |x: &[f64]| match start
        .unflatten(x)
        .and_then(|p| whitened_log_posterior_gradient(&p, data, locations, &cfg.solver))
    {
        Ok(vg) => vg,
        Err(_) => (f64::NEG_INFINITY, vec![0.0; x.len()]),
    };
    match maximize(&mut objective, &start.flatten(), &cfg.optim) {
        Ok(opt) => {
            let params = start.unflatten(&opt.x).expect("optimizer preserves length");
            outcome.final_value = Some(opt.value);
            outcome.status = Some(opt.status);
            outcome.iterations = opt.trace.len() - 1;
            (outcome, Some(params))
        }
        Err(e) => {
            outcome.error = Some(e.to_string());
            (outcome, None)
        }
    }
}

/// MAP estimate by L-BFGS from `cfg.restarts` perturbations of the
/// initialization; the restart with the highest log posterior wins.
pub fn fit(data: &Dataset, grid: &GridSpec, lengthscales: &[f64], cfg: &FitConfig) -> Result<Fit> {
    check_dim(data.dim(), grid.dim())?;
    cfg.optim.validate()?;
    cfg.solver.validate()?;
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("at least one restart is required".into()));
    }
    if !(cfg.perturbation >= 0.0 && cfg.perturbation.is_finite()) {
        return Err(Error::InvalidArgument("perturbation scale must be non-negative".into()));
    }
    let locations = make_grid(grid);
    let init = init_inducing(data, &locations, lengthscales, &cfg.init_scales, &cfg.solver)?;

    let run = |i: usize| run_restart(i, &init.params, data, &locations, cfg);
    let results: Vec<(RestartOutcome, Option<ModelParams>)> = if cfg.parallel {
        (0..cfg.restarts).into_par_iter().map(run).collect()
    } else {
        (0..cfg.restarts).map(run).collect()
    };

    let mut best: Option<(usize, f64)> = None;
    for (i, (outcome, _)) in results.iter().enumerate() {
        if let Some(v) = outcome.final_value {
            if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let Some((best_index, _)) = best else {
        return Err(Error::FitFailed { restarts: cfg.restarts });
    };
    let mut outcomes = Vec::with_capacity(results.len());
    let mut best_params = None;
    for (i, (outcome, params)) in results.into_iter().enumerate() {
        if i == best_index {
            best_params = params;
        }
        outcomes.push(outcome);
    }
    let model = FittedModel::new(locations, best_params.expect("best restart has parameters"), cfg.solver.clone())?;
    Ok(Fit {
        model,
        diagnostics: FitDiagnostics {
            init_scale: init.scale,
            init_value: init.objective,
            best_restart: best_index,
            restarts: outcomes,
        },
    })
}

/// Validation score of one lengthscale candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub lengthscale: f64,
    /// `None` when the candidate could not be fitted or was not evaluated.
    pub validation_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthscaleSelection {
    pub best: f64,
    pub candidates: Vec<CandidateScore>,
}

/// Fraction of each series' time span used for training during selection.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Splits every series at 80% of its time span.
pub fn split_for_validation(data: &Dataset) -> Result<(Dataset, Vec<Trajectory>)> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (s, tr) in data.series().iter().enumerate() {
        let t = tr.times();
        let cut = t[0] + TRAIN_FRACTION * (t[t.len() - 1] - t[0]);
        let a = tr.select(|i| t[i] <= cut);
        let b = tr.select(|i| t[i] > cut);
        if a.len() < 2 || b.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "series {s} is too short for an 80/20 split"
            )));
        }
        train.push(a);
        valid.push(b);
    }
    Ok((Dataset::new(train)?, valid))
}

fn validation_rmse(model: &FittedModel, valid: &[Trajectory]) -> Result<f64> {
    let mut ss = 0.0;
    let mut count = 0usize;
    for (s, v) in valid.iter().enumerate() {
        let pred = model.predict_series(s, v.times())?;
        ss += (pred.trajectory.states() - v.states()).norm_squared();
        count += v.states().len();
    }
    Ok((ss / count as f64).sqrt())
}

/// Picks the isotropic lengthscale with the lowest validation RMSE when
/// training on the first 80% of each series; ties go to the larger value.
pub fn select_lengthscale(
    data: &Dataset,
    grid: &GridSpec,
    candidates: &[f64],
    cfg: &FitConfig,
) -> Result<LengthscaleSelection> {
    match candidates {
        [] => Err(Error::InvalidArgument("no lengthscale candidates".into())),
        [only] => Ok(LengthscaleSelection {
            best: *only,
            candidates: vec![CandidateScore {
                lengthscale: *only,
                validation_rmse: None,
                error: None,
            }],
        }),
        _ => {
            let (train, valid) = split_for_validation(data)?;
            let d = data.dim();
            let scores: Vec<CandidateScore> = candidates
                .iter()
                .map(|&l| {
                    let outcome = fit(&train, grid, &vec![l; d], cfg)
                        .and_then(|f| validation_rmse(&f.model, &valid));
                    match outcome {
                        Ok(r) if r.is_finite() => CandidateScore {
                            lengthscale: l,
                            validation_rmse: Some(r),
                            error: None,
                        },
                        Ok(r) => CandidateScore {
                            lengthscale: l,
                            validation_rmse: None,
                            error: Some(format!("validation RMSE {r}")),
                        },
                        Err(e) => CandidateScore {
                            lengthscale: l,
                            validation_rmse: None,
                            error: Some(e.to_string()),
                        },
                    }
                })
                .collect();
            let mut best: Option<(f64, f64)> = None;
            for c in &scores {
                if let Some(r) = c.validation_rmse {
                    let better = match best {
                        None => true,
                        Some((bl, br)) => r < br || (r == br && c.lengthscale > bl),
                    };
                    if better {
                        best = Some((c.lengthscale, r));
                    }
                }
            }
            let (best, _) = best.ok_or(Error::SelectionFailed)?;
            Ok(LengthscaleSelection {
                best,
                candidates: scores,
            })
        }
    }
}

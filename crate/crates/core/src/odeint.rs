//! Adaptive Dormand–Prince 5(4) integration with dense output, and forward
//! sensitivities of the learned field.
//!
//! The sensitivity system for a field `f(x; u)` is
//!
//! ```text
//! dS_u/dt  = J S_u + R,     S_u(0)  = 0
//! dS_x0/dt = J S_x0,        S_x0(0) = I
//! ```
//!
//! with `J = ∂f/∂x` and `R = ∂f/∂u`. It is integrated jointly with the state
//! under the same error control, so the gradients it produces are as accurate
//! as the trajectory itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::InducingSet;

/// Any autonomous vector field `x ↦ f(x)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`; both slices have length [`VectorField::dim`].
    fn eval_into(&self, x: &[f64], out: &mut [f64]);
}

/// Vector field given by a closure.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

/// Linear field `f(x) = A x`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: DMatrix<f64>,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..x.len()).map(|j| self.a[(i, j)] * x[j]).sum();
        }
    }
}

/// Tolerances and budgets of the adaptive solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// First trial step; chosen automatically when `None`.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            initial_step: None,
            max_steps: 100_000,
            max_step: f64::INFINITY,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        if self.max_steps == 0 || !(self.max_step > 0.0) {
            return Err(Error::InvalidArgument("solver step limits must be positive".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument("initial step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// States sampled at strictly increasing times, one state per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DMatrix<f64>) -> Result<Self> {
        check_dim(times.len(), states.nrows())?;
        validate_times(&times)?;
        if let Some(bad) = states.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("trajectory contains non-finite value {bad}")));
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, i: usize) -> Vec<f64> {
        self.states.row(i).iter().copied().collect()
    }

    /// Rows whose indices satisfy `keep`.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Trajectory {
        let idx: Vec<usize> = (0..self.len()).filter(|i| keep(*i)).collect();
        let times = idx.iter().map(|i| self.times[*i]).collect();
        let states = self.states.select_rows(idx.iter());
        Trajectory { times, states }
    }

    /// Same states with every time shifted by `-offset`.
    pub fn shifted(&self, offset: f64) -> Trajectory {
        Trajectory {
            times: self.times.iter().map(|t| t - offset).collect(),
            states: self.states.clone(),
        }
    }

    pub fn into_parts(self) -> (Vec<f64>, DMatrix<f64>) {
        (self.times, self.states)
    }
}

pub(crate) fn validate_times(times: &[f64]) -> Result<()> {
    if let Some(t) = times.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite time {t}")));
    }
    if let Some(i) = (1..times.len()).find(|&i| times[i] <= times[i - 1]) {
        return Err(Error::InvalidArgument(format!(
            "times must be strictly increasing: t[{}] = {} follows {}",
            i,
            times[i],
            times[i - 1]
        )));
    }
    Ok(())
}

/// Sensitivities of the state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityState {
    /// `∂x/∂u` with `u = vec(U)` in column-major order (`k = d·M + m`), `D x MD`.
    pub wrt_vectors: DMatrix<f64>,
    /// `∂x/∂x₀`, `D x D`.
    pub wrt_initial: DMatrix<f64>,
}

/// A first-order system `y' = g(y)` on a flat state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Leading components subject to the divergence bound.
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn rhs(&mut self, y: &[f64], dy: &mut [f64]);
}

/// Magnitude of the tracked state beyond which integration is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e9;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Integrates `sys` from `y0` at `t = 0` and returns the state at each of
/// `times` (flattened, `times.len() x sys.dim()`, row-major).
pub fn solve<S: OdeSystem>(sys: &mut S, y0: &[f64], times: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = sys.dim();
    check_dim(n, y0.len())?;
    validate_times(times)?;
    if let Some(&t0) = times.first() {
        if t0 < 0.0 {
            return Err(Error::InvalidArgument(format!("output times must be >= 0, got {t0}")));
        }
    }
    let mut out = Vec::with_capacity(times.len() * n);
    let mut next = 0;
    while next < times.len() && times[next] == 0.0 {
        out.extend_from_slice(y0);
        next += 1;
    }
    if next == times.len() {
        return Ok(out);
    }
    let t_end = *times.last().unwrap();
    let sd = sys.state_dim();

    let mut y = y0.to_vec();
    let mut y1 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut r5 = vec![0.0; n];

    sys.rhs(&y, &mut k1);
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { last_time: 0.0 });
    }
    let mut t = 0.0;
    let mut h = match cfg.initial_step {
        Some(h) => h,
        None => initial_step(sys, &y, &k1, cfg, &mut ytmp, &mut k2),
    }
    .min(cfg.max_step)
    .min(t_end);
    let mut steps = 0usize;
    let mut rejected_last = false;

    while next < times.len() {
        if steps >= cfg.max_steps {
            return Err(Error::StepBudget {
                max_steps: cfg.max_steps,
                last_time: t,
            });
        }
        steps += 1;
        let remaining = t_end - t;
        if h >= remaining || remaining - h < 1e-12 * t_end.abs().max(1.0) {
            h = remaining;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(Error::Divergence { last_time: t });
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(&ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(&ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(&ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(&ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(&ytmp, &mut k6);
        for i in 0..n {
            y1[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(&y1, &mut k7);
        for i in 0..n {
            err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }

        let mut acc = 0.0;
        for i in 0..n {
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y1[i].abs());
            let e = err[i] / sc;
            acc += e * e;
        }
        let err_norm = (acc / n as f64).sqrt();

        if !err_norm.is_finite() {
            // a stage left the domain where the field is finite; retry smaller
            h *= FAC_MIN;
            rejected_last = true;
            continue;
        }

        if err_norm <= 1.0 {
            let t_new = if h == remaining { t_end } else { t + h };
            // dense output coefficients for any requested times in (t, t_new]
            let wants_dense = next < times.len() && times[next] < t_new;
            if wants_dense {
                for i in 0..n {
                    r5[i] = h
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
            }
            while next < times.len() && times[next] <= t_new {
                let tq = times[next];
                if tq == t_new {
                    out.extend_from_slice(&y1);
                } else {
                    let theta = (tq - t) / h;
                    let theta1 = 1.0 - theta;
                    for i in 0..n {
                        let ydiff = y1[i] - y[i];
                        let bspl = h * k1[i] - ydiff;
                        let r4 = ydiff - h * k7[i] - bspl;
                        out.push(y[i] + theta * (ydiff + theta1 * (bspl + theta * (r4 + theta1 * r5[i]))));
                    }
                }
                next += 1;
            }

            let norm2: f64 = y1[..sd].iter().map(|v| v * v).sum();
            if !norm2.is_finite() || norm2.sqrt() > DIVERGENCE_BOUND || y1.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { last_time: t });
            }

            std::mem::swap(&mut y, &mut y1);
            std::mem::swap(&mut k1, &mut k7);
            t = t_new;

            let mut fac = (SAFETY * err_norm.max(1e-10).powf(-0.2)).clamp(FAC_MIN, FAC_MAX);
            if rejected_last {
                fac = fac.min(1.0);
            }
            rejected_last = false;
            h = (h * fac).min(cfg.max_step);
        } else {
            let fac = (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, 1.0);
            h *= fac;
            rejected_last = true;
        }
    }
    Ok(out)
}

/// Starting step from the local scale of the solution and its derivative.
fn initial_step<S: OdeSystem>(
    sys: &mut S,
    y: &[f64],
    f0: &[f64],
    cfg: &SolverConfig,
    ytmp: &mut [f64],
    f1: &mut [f64],
) -> f64 {
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
    let d0 = rms(y);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    for i in 0..n {
        ytmp[i] = y[i] + h0 * f0[i];
    }
    sys.rhs(ytmp, f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if !d2.is_finite() {
        h0
    } else if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}

struct PlainSystem<'a, F: ?Sized> {
    field: &'a F,
}

impl<F: VectorField + ?Sized> OdeSystem for PlainSystem<'_, F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn rhs(&mut self, y: &[f64], dy: &mut [f64]) {
        self.field.eval_into(y, dy);
    }
}

/// Solves `x' = f(x)`, `x(0) = x0`, and samples the solution at `times`.
pub fn integrate<F: VectorField + ?Sized>(field: &F, x0: &[f64], times: &[f64], cfg: &SolverConfig) -> Result<Trajectory> {
    let d = field.dim();
    check_dim(d, x0.len())?;
    let mut sys = PlainSystem { field };
    let flat = solve(&mut sys, x0, times, cfg)?;
    Ok(Trajectory {
        times: times.to_vec(),
        states: DMatrix::from_row_slice(times.len(), d, &flat),
    })
}

/// Augmented state `[x | S_u | S_x0]`, both sensitivity blocks row-major.
struct SensitivitySystem<'a> {
    field: &'a InducingSet,
    whitened: bool,
    f: Vec<f64>,
    jac: Vec<f64>,
    w: DVector<f64>,
}

impl SensitivitySystem<'_> {
    fn layout(&self) -> (usize, usize) {
        let d = self.field.dim();
        (d, self.field.len() * d)
    }
}

impl OdeSystem for SensitivitySystem<'_> {
    fn dim(&self) -> usize {
        let (d, p) = self.layout();
        d + d * p + d * d
    }

    fn state_dim(&self) -> usize {
        self.field.dim()
    }

    fn rhs(&mut self, y: &[f64], dy: &mut [f64]) {
        let (d, p) = self.layout();
        let m = self.field.len();
        let x = &y[..d];
        self.field
            .eval_with_jacobian(x, &mut self.f, &mut self.jac, Some(&mut self.w));
        if self.whitened {
            // ∂f_d/∂Ũ[:, d] = Lᵀ k(Z,Z)^{-1} k(Z,x) = L^{-1} k(Z,x)
            self.field
                .factor()
                .l()
                .solve_lower_triangular_unchecked_mut(&mut self.w);
        } else {
            self.field.factor().solve_in_place(&mut self.w);
        }
        dy[..d].copy_from_slice(&self.f);

        let su = &y[d..d + d * p];
        let sx = &y[d + d * p..];
        let (dsu, dsx) = dy[d..].split_at_mut(d * p);
        for i in 0..d {
            let jrow = &self.jac[i * d..(i + 1) * d];
            let out = &mut dsu[i * p..(i + 1) * p];
            out.iter_mut().for_each(|v| *v = 0.0);
            for (j, &jij) in jrow.iter().enumerate() {
                if jij != 0.0 {
                    let src = &su[j * p..(j + 1) * p];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += jij * s;
                    }
                }
            }
            // R only touches the block of inducing vectors for dimension i
            for (o, wm) in out[i * m..(i + 1) * m].iter_mut().zip(self.w.iter()) {
                *o += wm;
            }
            let outx = &mut dsx[i * d..(i + 1) * d];
            for (c, o) in outx.iter_mut().enumerate() {
                *o = (0..d).map(|j| jrow[j] * sx[j * d + c]).sum();
            }
        }
    }
}

/// Integrates the learned field together with `∂x/∂u` and `∂x/∂x₀`.
pub fn integrate_with_sensitivities(
    inducing: &InducingSet,
    x0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<(Trajectory, Vec<SensitivityState>)> {
    sensitivities(inducing, x0, times, cfg, false)
}

/// Like [`integrate_with_sensitivities`], but `wrt_vectors` holds the
/// derivatives with respect to the whitened vectors `vec(Ũ)`.
pub fn integrate_with_whitened_sensitivities(
    inducing: &InducingSet,
    x0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<(Trajectory, Vec<SensitivityState>)> {
    sensitivities(inducing, x0, times, cfg, true)
}

fn sensitivities(
    inducing: &InducingSet,
    x0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
    whitened: bool,
) -> Result<(Trajectory, Vec<SensitivityState>)> {
    let d = inducing.dim();
    check_dim(d, x0.len())?;
    let p = inducing.len() * d;
    let mut sys = SensitivitySystem {
        field: inducing,
        whitened,
        f: vec![0.0; d],
        jac: vec![0.0; d * d],
        w: DVector::zeros(inducing.len()),
    };
    let n = sys.dim();
    let mut y0 = vec![0.0; n];
    y0[..d].copy_from_slice(x0);
    for i in 0..d {
        y0[d + d * p + i * d + i] = 1.0;
    }
    let flat = solve(&mut sys, &y0, times, cfg)?;
    let mut states = DMatrix::zeros(times.len(), d);
    let mut sens = Vec::with_capacity(times.len());
    for (r, chunk) in flat.chunks_exact(n).enumerate() {
        for j in 0..d {
            states[(r, j)] = chunk[j];
        }
        sens.push(SensitivityState {
            wrt_vectors: DMatrix::from_row_slice(d, p, &chunk[d..d + d * p]),
            wrt_initial: DMatrix::from_row_slice(d, d, &chunk[d + d * p..]),
        });
    }
    Ok((
        Trajectory {
            times: times.to_vec(),
            states,
        },
        sens,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_grid, GridSpec};
    use crate::kernel::KernelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn decay() -> LinearField {
        LinearField {
            a: DMatrix::from_element(1, 1, -1.0),
        }
    }

    fn rotation() -> LinearField {
        LinearField {
            a: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
        }
    }

    fn small_model(seed: u64, scale: f64) -> InducingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = make_grid(&GridSpec::new(vec![-1.5; 2], vec![1.5; 2], vec![3, 3]).unwrap());
        let u = DMatrix::from_fn(9, 2, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        InducingSet::from_vectors(z, u, KernelParams::isotropic(1.0, 1.0, 2).unwrap()).unwrap()
    }

    #[test]
    fn zero_field_is_constant() {
        let f = FnField::new(2, |_: &[f64], out: &mut [f64]| out.fill(0.0));
        let tr = integrate(&f, &[1.0, 2.0], &[0.0, 0.5, 3.0], &SolverConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(tr.state(i), vec![1.0, 2.0]);
        }
    }

    #[test]
    fn exponential_decay() {
        let tr = integrate(&decay(), &[1.0], &[1.0], &SolverConfig::default()).unwrap();
        assert!((tr.states()[(0, 0)] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn dense_output_matches_analytic_solution() {
        let times: Vec<f64> = (1..=40).map(|i| i as f64 * 0.123).collect();
        let tr = integrate(&decay(), &[1.0], &times, &SolverConfig::default()).unwrap();
        for (i, t) in times.iter().enumerate() {
            assert!((tr.states()[(i, 0)] - (-t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_closes_orbit() {
        let tr = integrate(&rotation(), &[1.0, 0.0], &[2.0 * PI], &SolverConfig::default()).unwrap();
        assert!((tr.states()[(0, 0)] - 1.0).abs() < 1e-5);
        assert!(tr.states()[(0, 1)].abs() < 1e-5);
    }

    #[test]
    fn tighter_tolerance_is_consistent() {
        let coarse = SolverConfig::with_tolerances(1e-6, 1e-8);
        let fine = SolverConfig::with_tolerances(5e-7, 5e-9);
        let a = integrate(&rotation(), &[1.0, 0.0], &[10.0], &coarse).unwrap();
        let b = integrate(&rotation(), &[1.0, 0.0], &[10.0], &fine).unwrap();
        let diff = (a.states() - b.states()).abs().max();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn blow_up_is_reported_as_divergence() {
        let f = FnField::new(1, |x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0]);
        // x' = x², x(0) = 1 blows up at t = 1
        let err = integrate(&f, &[1.0], &[2.0], &SolverConfig::default()).unwrap_err();
        match err {
            Error::Divergence { last_time } => assert!(last_time < 1.01 && last_time > 0.9, "{last_time}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_budget_is_enforced() {
        let cfg = SolverConfig {
            max_steps: 5,
            ..SolverConfig::default()
        };
        let err = integrate(&rotation(), &[1.0, 0.0], &[100.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::StepBudget { max_steps: 5, .. }));
    }

    #[test]
    fn rejects_bad_times() {
        let cfg = SolverConfig::default();
        assert!(integrate(&decay(), &[1.0], &[1.0, 0.5], &cfg).is_err());
        assert!(integrate(&decay(), &[1.0], &[-1.0, 0.5], &cfg).is_err());
        assert!(integrate(&decay(), &[1.0, 2.0], &[1.0], &cfg).is_err());
    }

    #[test]
    fn zero_field_sensitivities_are_exact() {
        let z = make_grid(&GridSpec::new(vec![-1.0; 2], vec![1.0; 2], vec![3, 3]).unwrap());
        let set = InducingSet::from_vectors(z, DMatrix::zeros(9, 2), KernelParams::isotropic(1.0, 1.0, 2).unwrap())
            .unwrap();
        let x0 = [0.3, -0.2];
        let times = [0.0, 0.5, 2.0];
        let (tr, sens) = integrate_with_sensitivities(&set, &x0, &times, &SolverConfig::default()).unwrap();
        let w = set.field_param_jacobian(&x0).unwrap();
        for (i, t) in times.iter().enumerate() {
            assert_eq!(tr.state(i), x0.to_vec());
            assert!((&sens[i].wrt_initial - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
            for d in 0..2 {
                for dp in 0..2 {
                    for m in 0..9 {
                        let expected = if d == dp { t * w[m] } else { 0.0 };
                        assert!((sens[i].wrt_vectors[(d, dp * 9 + m)] - expected).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let set = small_model(11, 0.8);
        let x0 = [0.4, -0.3];
        let times = [0.25, 0.6, 1.0];
        let tight = SolverConfig::with_tolerances(1e-11, 1e-13);
        let (_, sens) = integrate_with_sensitivities(&set, &x0, &times, &tight).unwrap();
        let h = 1e-5;
        for k in 0..18 {
            let (m, d) = (k % 9, k / 9);
            let mut up = set.vectors().clone();
            let mut dn = set.vectors().clone();
            up[(m, d)] += h;
            dn[(m, d)] -= h;
            let fu = InducingSet::from_vectors(set.locations().clone(), up, set.kernel().clone()).unwrap();
            let fd = InducingSet::from_vectors(set.locations().clone(), dn, set.kernel().clone()).unwrap();
            let a = integrate(&fu, &x0, &times, &tight).unwrap();
            let b = integrate(&fd, &x0, &times, &tight).unwrap();
            for i in 0..times.len() {
                for j in 0..2 {
                    let fdv = (a.states()[(i, j)] - b.states()[(i, j)]) / (2.0 * h);
                    let s = sens[i].wrt_vectors[(j, k)];
                    assert!((s - fdv).abs() <= 1e-4 * fdv.abs().max(1e-3), "k={k} i={i} j={j}: {s} vs {fdv}");
                }
            }
        }
        for c in 0..2 {
            let mut up = x0;
            let mut dn = x0;
            up[c] += h;
            dn[c] -= h;
            let a = integrate(&set, &up, &times, &tight).unwrap();
            let b = integrate(&set, &dn, &times, &tight).unwrap();
            for i in 0..times.len() {
                for j in 0..2 {
                    let fdv = (a.states()[(i, j)] - b.states()[(i, j)]) / (2.0 * h);
                    let s = sens[i].wrt_initial[(j, c)];
                    assert!((s - fdv).abs() <= 1e-4 * fdv.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn initial_sensitivity_is_identity() {
        let set = small_model(12, 1.0);
        let (_, sens) = integrate_with_sensitivities(&set, &[0.1, 0.2], &[0.0], &SolverConfig::default()).unwrap();
        assert_eq!(sens[0].wrt_initial, DMatrix::identity(2, 2));
        assert!(sens[0].wrt_vectors.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn augmented_state_agrees_with_plain_integration() {
        let set = small_model(13, 1.0);
        let cfg = SolverConfig::default();
        let times: Vec<f64> = (1..=10).map(|i| i as f64 * 0.2).collect();
        let plain = integrate(&set, &[0.5, 0.5], &times, &cfg).unwrap();
        let (aug, _) = integrate_with_sensitivities(&set, &[0.5, 0.5], &times, &cfg).unwrap();
        let diff = (plain.states() - aug.states()).abs().max();
        assert!(diff < 10.0 * cfg.rtol, "{diff}");
    }

    #[test]
    fn linearization_error_is_second_order() {
        let set = small_model(14, 1.0);
        let cfg = SolverConfig::with_tolerances(1e-11, 1e-13);
        let x0 = [0.2, 0.7];
        let times = [1.0];
        let (base, sens) = integrate_with_sensitivities(&set, &x0, &times, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let dir = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let residual = |eps: f64| {
            let u = set.vectors() + &dir * eps;
            let f = InducingSet::from_vectors(set.locations().clone(), u, set.kernel().clone()).unwrap();
            let moved = integrate(&f, &x0, &times, &cfg).unwrap();
            let delta = DVector::from_column_slice((&dir * eps).as_slice());
            let predicted = &sens[0].wrt_vectors * delta;
            (0..2)
                .map(|j| (moved.states()[(0, j)] - base.states()[(0, j)] - predicted[j]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let r1 = residual(1e-2);
        let r2 = residual(5e-3);
        let ratio = r1 / r2;
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }
}

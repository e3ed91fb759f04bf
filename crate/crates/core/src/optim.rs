//! L-BFGS maximizer with a Wolfe line search.
//!
//! The objective is maximized; internally the solver works on its negation.
//! An objective value of `-∞` (or NaN) at a trial point counts as a failed
//! trial and shrinks the step, which lets callers signal "outside the
//! feasible region" without aborting the run.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Number of stored `(s, y)` correction pairs.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `‖∇‖_∞` falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative objective change falls below this.
    pub objective_tolerance: f64,
    /// Sufficient-increase constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            gradient_tolerance: 1e-5,
            objective_tolerance: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 40,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument("Wolfe constants need 0 < c1 < c2 < 1".into()));
        }
        if self.memory == 0 || self.max_iterations == 0 || self.max_line_search_steps == 0 {
            return Err(Error::InvalidArgument("optimizer limits must be positive".into()));
        }
        if !(self.gradient_tolerance >= 0.0 && self.objective_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("optimizer tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    ConvergedGradient,
    ConvergedObjective,
    MaxIterations,
    LineSearchFailure,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::ConvergedGradient => "converged-gradient",
            Status::ConvergedObjective => "converged-objective",
            Status::MaxIterations => "max-iterations",
            Status::LineSearchFailure => "line-search-failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub value: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub status: Status,
    /// Value and gradient infinity-norm at the start and after every iteration.
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

/// Anything that can report a value and a gradient.
///
/// A returned value of `-∞` marks an infeasible point; the gradient is then
/// ignored.
pub trait Objective {
    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>);
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimization view of the objective: `φ = -value`, `∇φ = -gradient`.
struct Negated<'a, O: Objective + ?Sized> {
    inner: &'a mut O,
    evaluations: usize,
}

impl<O: Objective + ?Sized> Negated<'_, O> {
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evaluations += 1;
        let (v, mut g) = self.inner.value_and_gradient(x);
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            return (f64::INFINITY, g);
        }
        g.iter_mut().for_each(|gi| *gi = -*gi);
        (-v, g)
    }
}

struct Trial {
    step: f64,
    f: f64,
    g: Vec<f64>,
    x: Vec<f64>,
}

/// Maximizes `objective` starting from `x0`.
pub fn maximize<O: Objective + ?Sized>(objective: &mut O, x0: &[f64], cfg: &OptimConfig) -> Result<Optimum> {
    cfg.validate()?;
    let mut neg = Negated {
        inner: objective,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    let (mut f, mut g) = neg.eval(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut trace = vec![TraceEntry {
        value: -f,
        gradient_norm: inf_norm(&g),
    }];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut status = Status::MaxIterations;
    let mut stalled_once = false;

    for _ in 0..cfg.max_iterations {
        if inf_norm(&g) < cfg.gradient_tolerance {
            status = Status::ConvergedGradient;
            break;
        }
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // stale curvature information; fall back to steepest descent
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let initial = if pairs.is_empty() {
            (1.0 / inf_norm(&g).max(f64::MIN_POSITIVE)).min(1.0)
        } else {
            1.0
        };
        let trial = match line_search(&mut neg, &x, f, slope, &dir, initial, cfg) {
            Some(t) => t,
            None if !pairs.is_empty() => {
                pairs.clear();
                let sd: Vec<f64> = g.iter().map(|v| -v).collect();
                let sd_slope = -dot(&g, &g);
                let init = (1.0 / inf_norm(&g).max(f64::MIN_POSITIVE)).min(1.0);
                match line_search(&mut neg, &x, f, sd_slope, &sd, init, cfg) {
                    Some(t) => t,
                    None => {
                        status = Status::LineSearchFailure;
                        break;
                    }
                }
            }
            None => {
                status = Status::LineSearchFailure;
                break;
            }
        };

        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let f_old = f;
        x = trial.x;
        f = trial.f;
        g = trial.g;
        trace.push(TraceEntry {
            value: -f,
            gradient_norm: inf_norm(&g),
        });
        if (f_old - f).abs() <= cfg.objective_tolerance * f_old.abs().max(f.abs()).max(1.0) {
            if inf_norm(&g) < cfg.gradient_tolerance {
                status = Status::ConvergedGradient;
                break;
            }
            if !stalled_once {
                // a negligible step with a large gradient is usually a poor
                // quasi-Newton direction; retry once from steepest descent
                stalled_once = true;
                pairs.clear();
                continue;
            }
            status = Status::ConvergedObjective;
            break;
        }
        stalled_once = false;
    }

    Ok(Optimum {
        x,
        value: -f,
        status,
        trace,
        evaluations: neg.evaluations,
    })
}

/// Two-loop recursion: `-H ∇φ` with the scaled-identity initial Hessian.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

/// Bracketing line search for the strong Wolfe conditions.
///
/// Returns the accepted trial, or the best sufficient-decrease point seen if
/// the curvature condition could not be met within the budget. `None` means
/// no trial decreased `φ` sufficiently.
fn line_search<O: Objective + ?Sized>(
    neg: &mut Negated<'_, O>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    dir: &[f64],
    initial: f64,
    cfg: &OptimConfig,
) -> Option<Trial> {
    let eval_at = |neg: &mut Negated<'_, O>, step: f64| {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let (f, g) = neg.eval(&xt);
        Trial { step, f, g, x: xt }
    };
    let armijo = |t: &Trial| t.f.is_finite() && t.f <= f0 + cfg.c1 * t.step * slope0;
    let curvature = |t: &Trial| dot(&t.g, dir).abs() <= -cfg.c2 * slope0;

    let mut best: Option<Trial> = None;
    let keep_best = |best: &mut Option<Trial>, t: &Trial| {
        if armijo(t) && best.as_ref().is_none_or(|b| t.f < b.f) {
            *best = Some(Trial {
                step: t.step,
                f: t.f,
                g: t.g.clone(),
                x: t.x.clone(),
            });
        }
    };

    // (step, φ, φ') at the low end of the bracket
    let mut lo = (0.0, f0, slope0);
    let mut hi: Option<(f64, f64, f64)> = None;
    let mut step = initial;
    for _ in 0..cfg.max_line_search_steps {
        let t = eval_at(neg, step);
        keep_best(&mut best, &t);
        if !t.f.is_finite() {
            // infeasible: shrink toward the known-good end
            hi = Some((step, f64::INFINITY, f64::NAN));
        } else {
            let dphi = dot(&t.g, dir);
            if !armijo(&t) || t.f >= lo.1 && lo.0 > 0.0 {
                hi = Some((step, t.f, dphi));
            } else if curvature(&t) {
                return Some(t);
            } else if dphi * (step - lo.0) >= 0.0 {
                hi = Some(lo);
                lo = (step, t.f, dphi);
            } else {
                lo = (step, t.f, dphi);
            }
        }
        step = match hi {
            None => step * 2.0,
            Some(h) => interpolate(lo, h),
        };
        if let Some(h) = hi {
            if (h.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(h.0.abs()).max(1e-300) {
                break;
            }
        }
    }
    best
}

/// Trial step inside the bracket `[lo, hi]` from a cubic or quadratic model,
/// safeguarded to the middle 80% of the interval.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a, fa, da) = lo;
    let (b, fb, db) = hi;
    let width = b - a;
    let mut t = if !fb.is_finite() {
        f64::NAN
    } else if db.is_finite() {
        let d1 = da + db - 3.0 * (fa - fb) / (a - b);
        let disc = d1 * d1 - da * db;
        if disc >= 0.0 {
            let d2 = disc.sqrt() * (b - a).signum();
            b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
        } else {
            f64::NAN
        }
    } else {
        // quadratic through (a, fa, da) and (b, fb)
        let denom = 2.0 * (fb - fa - da * width);
        if denom > 0.0 {
            a - da * width * width / denom
        } else {
            f64::NAN
        }
    };
    let (lo_b, hi_b) = (a.min(b), a.max(b));
    let margin = 0.1 * (hi_b - lo_b);
    if !t.is_finite() || t < lo_b + margin || t > hi_b - margin {
        t = a + 0.5 * width;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(a: Vec<f64>) -> impl FnMut(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| {
            let v = -x.iter().zip(&a).map(|(xi, ai)| (xi - ai).powi(2)).sum::<f64>();
            let g = x.iter().zip(&a).map(|(xi, ai)| -2.0 * (xi - ai)).collect();
            (v, g)
        }
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        let gb = 200.0 * (b - a * a);
        (-v, vec![-ga, -gb])
    }

    #[test]
    fn concave_quadratic_in_few_iterations() {
        let target = vec![1.0, -2.0, 3.5, 0.25];
        let mut obj = quadratic(target.clone());
        let opt = maximize(&mut obj, &[10.0, 10.0, -7.0, 0.0], &OptimConfig::default()).unwrap();
        for (x, a) in opt.x.iter().zip(&target) {
            assert!((x - a).abs() < 1e-8);
        }
        assert!(opt.trace.len() - 1 <= 5, "{} iterations", opt.trace.len() - 1);
        assert_eq!(opt.status, Status::ConvergedGradient);
    }

    #[test]
    fn rosenbrock_optimum() {
        let cfg = OptimConfig {
            gradient_tolerance: 1e-10,
            objective_tolerance: 0.0,
            ..OptimConfig::default()
        };
        let mut obj = rosenbrock;
        let opt = maximize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        assert!((opt.x[0] - 1.0).abs() < 1e-5 && (opt.x[1] - 1.0).abs() < 1e-5, "{:?}", opt.x);
        assert!(opt.value <= 0.0);
    }

    #[test]
    fn infeasible_region_is_backtracked() {
        // concave quadratic peaked at (3, 0), but only defined inside |x| < 2
        let mut obj = |x: &[f64]| {
            if x[0] * x[0] + x[1] * x[1] >= 4.0 {
                (f64::NEG_INFINITY, vec![0.0, 0.0])
            } else {
                quadratic(vec![3.0, 0.0])(x)
            }
        };
        let cfg = OptimConfig {
            max_iterations: 30,
            ..OptimConfig::default()
        };
        let opt = maximize(&mut obj, &[0.0, 0.5], &cfg).unwrap();
        assert!(opt.value.is_finite());
        assert!(opt.value > obj(&[0.0, 0.5]).0);
        assert!(opt.x[0] > 1.5, "{:?}", opt.x);
        // the first iteration must have found a feasible ascent step
        assert!(opt.trace.len() > 1);
    }

    #[test]
    fn accepted_steps_never_decrease() {
        let mut obj = rosenbrock;
        let opt = maximize(&mut obj, &[-1.2, 1.0], &OptimConfig::default()).unwrap();
        for w in opt.trace.windows(2) {
            assert!(w[1].value >= w[0].value);
        }
        assert_eq!(opt.value, rosenbrock(&opt.x).0);
    }

    #[test]
    fn deterministic() {
        let mut a = rosenbrock;
        let mut b = rosenbrock;
        let cfg = OptimConfig::default();
        assert_eq!(maximize(&mut a, &[0.3, -0.4], &cfg).unwrap().x, maximize(&mut b, &[0.3, -0.4], &cfg).unwrap().x);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut obj = |_: &[f64]| (f64::NEG_INFINITY, vec![0.0]);
        assert!(matches!(maximize(&mut obj, &[0.0], &OptimConfig::default()), Err(Error::NonFiniteStart)));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = OptimConfig {
            c1: 0.5,
            c2: 0.4,
            ..OptimConfig::default()
        };
        let mut obj = rosenbrock;
        assert!(maximize(&mut obj, &[0.0, 0.0], &cfg).is_err());
    }
}

//! L-BFGS with a strong Wolfe line search, and fixed-step gradient descent.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Anything that returns `(loss, gradient)` at a point.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>);
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at iteration {iter}")]
    NonFiniteObjective { iter: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub init_step: f64,
    pub max_iters: usize,
    /// Absolute sup-norm gradient tolerance.
    pub tol_grad: f64,
    /// Relative loss-change tolerance `|Δf| ≤ tol_loss·max(1, |f|)`; 0 disables it.
    pub tol_loss: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 20,
            c1: 1e-4,
            c2: 0.9,
            init_step: 1.0,
            max_iters: 5000,
            tol_grad: 1e-8,
            tol_loss: 0.0,
            max_line_search: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(OptimError::InvalidConfig(format!("need 0 < c1 < c2 < 1, got c1={} c2={}", self.c1, self.c2)));
        }
        if self.memory == 0 {
            return Err(OptimError::InvalidConfig("memory must be at least 1".into()));
        }
        if !(self.init_step > 0.0) {
            return Err(OptimError::InvalidConfig("init_step must be positive".into()));
        }
        if self.max_line_search == 0 {
            return Err(OptimError::InvalidConfig("max_line_search must be at least 1".into()));
        }
        if !(self.tol_grad >= 0.0) || !(self.tol_loss >= 0.0) {
            return Err(OptimError::InvalidConfig("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    LossTol,
    MaxIters,
    LineSearchFailure,
    Callback,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::GradTol | Termination::LossTol | Termination::Callback)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::GradTol => "grad_tol",
            Termination::LossTol => "loss_tol",
            Termination::MaxIters => "max_iters",
            Termination::LineSearchFailure => "line_search_failure",
            Termination::Callback => "callback",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_inf: f64,
    pub step_len: f64,
    /// Cumulative objective evaluations.
    pub fevals: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimTrace {
    /// Row 0 is the starting point.
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
    /// Steps accepted through the approximate-Wolfe test.
    pub approximate_steps: usize,
}

impl OptimTrace {
    pub fn iterations(&self) -> usize {
        self.rows.last().map_or(0, |r| r.iter)
    }

    pub fn fevals(&self) -> usize {
        self.rows.last().map_or(0, |r| r.fevals)
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub trace: OptimTrace,
}

/// Snapshot handed to the monitor after every accepted iterate.
pub struct IterInfo<'a> {
    pub iter: usize,
    pub x: &'a [f64],
    pub loss: f64,
    pub grad: &'a [f64],
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

pub fn lbfgs_minimize(
    objective: &mut dyn Objective,
    x0: &[f64],
    config: &LbfgsConfig,
) -> Result<OptimResult, OptimError> {
    lbfgs_minimize_with(objective, x0, config, &mut |_| false)
}

/// L-BFGS; `monitor` is called at every iterate (including the start) and
/// stops the run by returning `true`.
pub fn lbfgs_minimize_with(
    objective: &mut dyn Objective,
    x0: &[f64],
    config: &LbfgsConfig,
    monitor: &mut dyn FnMut(&IterInfo) -> bool,
) -> Result<OptimResult, OptimError> {
    config.validate()?;
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective.evaluate(&x);
    let mut fevals = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteObjective { iter: 0 });
    }
    let mut rows = vec![TraceRow { iter: 0, loss: f, grad_inf: norm_inf(&g), step_len: 0.0, fevals }];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut approximate_steps = 0;
    let finish = |x, f, g, rows, termination, approximate_steps| {
        Ok(OptimResult { x, loss: f, grad: g, trace: OptimTrace { rows, termination, approximate_steps } })
    };

    if monitor(&IterInfo { iter: 0, x: &x, loss: f, grad: &g }) {
        return finish(x, f, g, rows, Termination::Callback, 0);
    }
    if norm_inf(&g) <= config.tol_grad {
        return finish(x, f, g, rows, Termination::GradTol, 0);
    }

    let mut iter = 0;
    while iter < config.max_iters {
        let mut d = if pairs.is_empty() { g.iter().map(|v| -v).collect() } else { two_loop(&g, &pairs) };
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -dot(&g, &g);
        }
        let t0 = if pairs.is_empty() { config.init_step.min(1.0 / norm2(&g)) } else { config.init_step };
        let mut ls = line_search(objective, &x, f, &d, dphi0, t0, config);
        fevals += ls.evals;
        if ls.accepted.is_none() && !pairs.is_empty() {
            // retry once along steepest descent with a fresh memory
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = -dot(&g, &g);
            ls = line_search(objective, &x, f, &d, dphi0, config.init_step.min(1.0 / norm2(&g)), config);
            fevals += ls.evals;
        }
        let Some(step) = ls.accepted else {
            rows.push(TraceRow { iter: iter + 1, loss: f, grad_inf: norm_inf(&g), step_len: 0.0, fevals });
            return finish(x, f, g, rows, Termination::LineSearchFailure, approximate_steps);
        };
        iter += 1;
        if step.approximate {
            approximate_steps += 1;
        }
        let x_new = axpy(&x, step.t, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if pairs.len() == config.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let f_old = f;
        x = x_new;
        f = step.f;
        g = step.g;
        let grad_inf = norm_inf(&g);
        rows.push(TraceRow { iter, loss: f, grad_inf, step_len: step.t * norm2(&d), fevals });
        if monitor(&IterInfo { iter, x: &x, loss: f, grad: &g }) {
            return finish(x, f, g, rows, Termination::Callback, approximate_steps);
        }
        if grad_inf <= config.tol_grad {
            return finish(x, f, g, rows, Termination::GradTol, approximate_steps);
        }
        if config.tol_loss > 0.0 && (f_old - f).abs() <= config.tol_loss * f.abs().max(1.0) {
            return finish(x, f, g, rows, Termination::LossTol, approximate_steps);
        }
    }
    finish(x, f, g, rows, Termination::MaxIters, approximate_steps)
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        let a = rho * dot(s, &q);
        alphas[k] = a;
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
    }
    let (s, y, _) = pairs.back().expect("non-empty memory");
    let gamma = dot(s, y) / dot(y, y);
    for qi in &mut q {
        *qi *= gamma;
    }
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alphas[k] - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

struct Accepted {
    t: f64,
    f: f64,
    g: Vec<f64>,
    approximate: bool,
}

struct LineSearch {
    accepted: Option<Accepted>,
    evals: usize,
}

#[derive(Clone)]
struct Sample {
    t: f64,
    f: f64,
    dphi: f64,
    g: Vec<f64>,
}

/// Bracketing phase followed by cubic-interpolation zoom. A point whose loss
/// differs from the start only by rounding noise is also accepted when its
/// slope satisfies `c2·φ'(0) ≤ φ'(t) ≤ (2c1 − 1)·φ'(0)` (approximate Wolfe),
/// so that progress near the optimum is not blocked by cancellation in the
/// loss.
fn line_search(
    objective: &mut dyn Objective,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dphi0: f64,
    t_init: f64,
    config: &LbfgsConfig,
) -> LineSearch {
    let noise = 1e-12 * f0.abs().max(f64::MIN_POSITIVE);
    let mut evals = 0;
    let mut eval = |t: f64, evals: &mut usize| -> Sample {
        *evals += 1;
        let (f, g) = objective.evaluate(&axpy(x, t, d));
        let (f, dphi) = if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            (f, dot(&g, d))
        } else {
            (f64::INFINITY, f64::NAN)
        };
        Sample { t, f, dphi, g }
    };
    let armijo = |s: &Sample| s.f <= f0 + config.c1 * s.t * dphi0;
    let curvature = |s: &Sample| s.dphi.abs() <= -config.c2 * dphi0;
    let approximate = |s: &Sample| {
        (s.f - f0).abs() <= noise && config.c2 * dphi0 <= s.dphi && s.dphi <= (2.0 * config.c1 - 1.0) * dphi0
    };
    let accept = |s: Sample, approximate: bool| Accepted { t: s.t, f: s.f, g: s.g, approximate };

    let mut prev = Sample { t: 0.0, f: f0, dphi: dphi0, g: Vec::new() };
    let mut t = t_init;
    let mut bracket = None;
    for i in 0..config.max_line_search {
        let cur = eval(t, &mut evals);
        if !cur.f.is_finite() {
            // infeasible point: shrink towards the last good one
            if evals >= config.max_line_search {
                break;
            }
            t = 0.5 * (prev.t + t);
            continue;
        }
        if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            if approximate(&cur) {
                return LineSearch { accepted: Some(accept(cur, true)), evals };
            }
            bracket = Some((prev, cur));
            break;
        }
        if curvature(&cur) {
            return LineSearch { accepted: Some(accept(cur, false)), evals };
        }
        if cur.dphi >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        t = if i == 0 { cubic_step(&prev, &cur, cur.t * 1.1, cur.t * 4.0) } else { 2.0 * cur.t };
        prev = cur;
        if evals >= config.max_line_search {
            break;
        }
    }
    let Some((mut lo, mut hi)) = bracket else {
        return LineSearch { accepted: None, evals };
    };
    while evals < config.max_line_search {
        let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
        let width = b - a;
        if width <= 1e-16 * b.max(1e-300) {
            break;
        }
        let t = if hi.f.is_finite() {
            cubic_step(&lo, &hi, a + 0.1 * width, b - 0.1 * width)
        } else {
            0.5 * (lo.t + hi.t)
        };
        let cur = eval(t, &mut evals);
        if cur.f.is_finite() && (cur.f - f0).abs() <= noise {
            // loss differences are rounding noise here; bracket by slope sign
            if approximate(&cur) || (armijo(&cur) && curvature(&cur)) {
                let approx = !(armijo(&cur) && curvature(&cur));
                return LineSearch { accepted: Some(accept(cur, approx)), evals };
            }
            if cur.dphi >= 0.0 {
                hi = cur;
            } else {
                lo = cur;
            }
            continue;
        }
        if !cur.f.is_finite() || !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return LineSearch { accepted: Some(accept(cur, false)), evals };
            }
            if cur.dphi * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    LineSearch { accepted: None, evals }
}

/// Minimizer of the cubic through two samples, clamped to `[lo, hi]`
/// (falls back to the midpoint if the cubic has no usable minimizer).
fn cubic_step(a: &Sample, b: &Sample, lo: f64, hi: f64) -> f64 {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let fallback = 0.5 * (lo + hi);
    if !(a.dphi.is_finite() && b.dphi.is_finite()) || a.t == b.t {
        return fallback;
    }
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.t - b.t);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if !(disc >= 0.0) {
        return fallback;
    }
    let d2 = (b.t - a.t).signum() * disc.sqrt();
    let denom = b.dphi - a.dphi + 2.0 * d2;
    if denom == 0.0 {
        return fallback;
    }
    let t = b.t - (b.t - a.t) * (b.dphi + d2 - d1) / denom;
    if t.is_finite() {
        t.clamp(lo, hi)
    } else {
        fallback
    }
}

#[derive(Clone, Debug)]
pub struct GdResult {
    pub x: Vec<f64>,
    /// `‖x_k − x*‖₂` for k = 0..=iters when a reference point was supplied.
    pub errors: Vec<f64>,
    pub losses: Vec<f64>,
}

/// `x_{k+1} = x_k − α ∇L(x_k)` for a fixed number of iterations.
pub fn gradient_descent(
    objective: &mut dyn Objective,
    x0: &[f64],
    alpha: f64,
    iters: usize,
    x_star: Option<&[f64]>,
) -> Result<GdResult, OptimError> {
    if !(alpha >= 0.0) {
        return Err(OptimError::InvalidConfig(format!("step size must be non-negative, got {alpha}")));
    }
    let err = |x: &[f64]| x_star.map(|s| x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
    let mut x = x0.to_vec();
    let mut errors = Vec::new();
    let mut losses = Vec::with_capacity(iters + 1);
    errors.extend(err(&x));
    for k in 0..=iters {
        let (f, g) = objective.evaluate(&x);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteObjective { iter: k });
        }
        losses.push(f);
        if k == iters {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= alpha * gi;
        }
        errors.extend(err(&x));
    }
    Ok(GdResult { x, errors, losses })
}

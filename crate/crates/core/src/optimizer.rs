//! Limited-memory BFGS with an Armijo backtracking line search.
//!
//! Only accepted iterates are reported, so the objective sequence is
//! nonincreasing. The solver is fully deterministic: the same objective,
//! start point and configuration reproduce the same trajectory bit for bit.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A smooth scalar function with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_and_gradient(x, &mut g)
    }
}

/// Adapts a closure `(x, grad) -> value`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) -> f64> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm falls below this.
    pub gradient_tolerance: f64,
    pub initial_step: f64,
    pub backtracking_factor: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
    pub memory: usize,
    /// L2 penalty added by the calibration fits; unused by `minimize` itself.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            initial_step: 1.0,
            backtracking_factor: 0.5,
            sufficient_decrease: 1e-4,
            memory: 10,
            ridge: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidArgument("gradient tolerance must be positive".into()));
        }
        if !(self.backtracking_factor > 0.0 && self.backtracking_factor < 1.0) {
            return Err(Error::InvalidArgument("backtracking factor must lie in (0, 1)".into()));
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::InvalidArgument("sufficient-decrease constant must lie in (0, 1)".into()));
        }
        if !(self.initial_step > 0.0) || self.memory == 0 {
            return Err(Error::InvalidArgument("initial step and memory must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub final_value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub wall_time: Duration,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn lbfgs_direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alpha.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alpha.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `objective` from `x0`.
///
/// Running out of iterations is reported through `FitReport::converged`; a
/// non-finite value or gradient at the start point is an error.
pub fn minimize(objective: &dyn Objective, x0: &[f64], cfg: &OptimizerConfig) -> Result<(Vec<f64>, FitReport)> {
    cfg.validate()?;
    let n = objective.dim();
    if x0.len() != n {
        return Err(Error::InvalidArgument(format!(
            "start point has {} entries, objective expects {n}",
            x0.len()
        )));
    }
    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective.value_and_gradient(&x, &mut g);
    if !f.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            message: format!("objective {f} or its gradient is not finite at the start point"),
            iterate: x,
        });
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut converged = inf_norm(&g) <= cfg.gradient_tolerance;
    let mut x_trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];

    while !converged && iterations < cfg.max_iterations {
        let mut d = lbfgs_direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let mut step = if history.is_empty() {
            cfg.initial_step / dot(&d, &d).sqrt().max(1.0)
        } else {
            1.0
        };
        let accepted = loop {
            for i in 0..n {
                x_trial[i] = x[i] + step * d[i];
            }
            let f_trial = objective.value_and_gradient(&x_trial, &mut g_trial);
            let finite = f_trial.is_finite() && g_trial.iter().all(|v| v.is_finite());
            if finite && f_trial <= f + cfg.sufficient_decrease * step * slope {
                break Some(f_trial);
            }
            step *= cfg.backtracking_factor;
            if step * inf_norm(&d) < 1e-16 * (1.0 + inf_norm(&x)) {
                break None;
            }
        };

        let Some(f_new) = accepted else {
            if history.is_empty() {
                // no progress possible along the steepest descent direction
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = x_trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut x_trial);
        std::mem::swap(&mut g, &mut g_trial);
        f = f_new;
        iterations += 1;
        converged = inf_norm(&g) <= cfg.gradient_tolerance;
    }

    let report = FitReport {
        final_value: f,
        iterations,
        gradient_norm: inf_norm(&g),
        converged,
        wall_time: start.elapsed(),
    };
    Ok((x, report))
}

/// Largest relative deviation between the analytic gradient and central
/// finite differences with step `h`.
///
/// Each coordinate's deviation is scaled by `max(|analytic|, |numeric|, 1)`,
/// which is a relative error for large components and an absolute one near
/// zero.
pub fn check_gradient(objective: &dyn Objective, x: &[f64], h: f64) -> f64 {
    let n = objective.dim();
    let mut analytic = vec![0.0; n];
    objective.value_and_gradient(x, &mut analytic);
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..n {
        probe[i] = x[i] + h;
        let up = objective.value(&probe);
        probe[i] = x[i] - h;
        let down = objective.value(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

//! Box-constrained minimizer for the flattened control plan.
//!
//! Projected gradient descent with Armijo backtracking, accelerated by an
//! L-BFGS two-loop direction restricted to the free (non-active-bound)
//! variables and reset whenever the active set changes. Gradients come from
//! feasibility-preserving finite differences — central in the interior,
//! one-sided within a step of a bound — so every point the objective sees
//! satisfies the bounds exactly. The solver is stateless and deterministic:
//! identical inputs produce the identical report.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative curvature threshold under which an L-BFGS pair is discarded.
const CURVATURE_TOL: f64 = 1e-12;

/// Elementwise box constraints on the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "lower bound has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for i in 0..lower.len() {
            if !(lower[i].is_finite() && upper[i].is_finite()) {
                return Err(Error::Config(format!("bounds[{i}] must be finite")));
            }
            if lower[i] > upper[i] {
                return Err(Error::Config(format!(
                    "bounds[{i}] are crossed: lower {} > upper {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Bounds { lower, upper })
    }

    /// Repeat per-block bounds over `blocks` consecutive blocks (the flat
    /// plan is a concatenation of input vectors sharing one input box).
    pub fn tile(lower: &DVector<f64>, upper: &DVector<f64>, blocks: usize) -> Result<Self> {
        let n = lower.len();
        let mut lo = DVector::zeros(n * blocks);
        let mut hi = DVector::zeros(n * blocks);
        for b in 0..blocks {
            lo.rows_mut(b * n, n).copy_from(lower);
            hi.rows_mut(b * n, n).copy_from(upper);
        }
        Bounds::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Elementwise clamp onto the box; idempotent.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lower[i], self.upper[i]))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..x.len()).all(|i| x[i] >= self.lower[i] && x[i] <= self.upper[i])
    }
}

/// Elementwise clamp of a point onto a box.
pub fn project(x: &DVector<f64>, bounds: &Bounds) -> DVector<f64> {
    bounds.project(x)
}

/// Solver options. Defaults suit plans of a few hundred variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Absolute ∞-norm threshold on the projected gradient.
    pub grad_tol: f64,
    /// Trial step for plain gradient iterations (quasi-Newton steps try 1).
    pub step_init: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    /// Relative finite-difference step; the per-coordinate step is
    /// `fd_step·(1+|x_i|)`.
    pub fd_step: f64,
    /// Number of retained L-BFGS pairs (0 disables the quasi-Newton model).
    pub memory: usize,
    pub max_backtracks: usize,
    /// Optional wall-clock budget in seconds; exceeding it returns the best
    /// iterate so far with `converged = false`.
    pub time_budget: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 200,
            grad_tol: 1e-6,
            step_init: 1.0,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            fd_step: 1e-6,
            memory: 10,
            max_backtracks: 40,
            time_budget: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("step_init", self.step_init),
            ("fd_step", self.fd_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive real, got {v}")));
            }
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 0.5) {
            return Err(Error::Config(format!(
                "armijo_c must lie in (0, 0.5), got {}",
                self.armijo_c
            )));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Config(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if self.max_backtracks == 0 {
            return Err(Error::Config("max_backtracks must be positive".into()));
        }
        if let Some(b) = self.time_budget {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("time_budget must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub best_plan: DVector<f64>,
    pub best_value: f64,
    pub iterations: usize,
    pub objective_evals: usize,
    /// ∞-norm of `x - project(x - ∇f(x))` at the returned plan.
    pub kkt_residual: f64,
    pub converged: bool,
}

/// Feasibility-preserving finite-difference gradient: central differences
/// where both probes stay inside the box, one-sided otherwise, zero for
/// coordinates whose box is thinner than two steps.
pub fn fd_gradient<F>(
    f: &F,
    x: &DVector<f64>,
    fx: f64,
    bounds: &Bounds,
    fd_step: f64,
    evals: &AtomicUsize,
) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = x.len();
    let entries: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = fd_step * (1.0 + x[i].abs());
            let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
            if hi - lo <= 2.0 * h {
                return 0.0;
            }
            let room_up = x[i] + h <= hi;
            let room_down = x[i] - h >= lo;
            if room_up && room_down {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                evals.fetch_add(2, Ordering::Relaxed);
                (f(&xp) - f(&xm)) / (2.0 * h)
            } else if room_up {
                let mut xp = x.clone();
                xp[i] += h;
                evals.fetch_add(1, Ordering::Relaxed);
                (f(&xp) - fx) / h
            } else {
                let mut xm = x.clone();
                xm[i] -= h;
                evals.fetch_add(1, Ordering::Relaxed);
                (fx - f(&xm)) / h
            }
        })
        .collect();
    DVector::from_vec(entries)
}

fn infinity_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn active_mask(x: &DVector<f64>, g: &DVector<f64>, bounds: &Bounds) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] == bounds.lower[i] && g[i] > 0.0) || (x[i] == bounds.upper[i] && g[i] < 0.0))
        .collect()
}

fn masked(v: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| if active[i] { 0.0 } else { v[i] })
}

/// Two-loop L-BFGS recursion over stored (s, y, 1/sᵀy) pairs, oldest first.
fn lbfgs_direction(
    g_free: &DVector<f64>,
    memory: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    let mut q = g_free.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let alpha = rho * s.dot(&q);
        q -= alpha * y;
        alphas.push(alpha);
    }
    let gamma = memory.back().map_or(1.0, |(s, y, _)| s.dot(y) / y.dot(y));
    let mut r = gamma * q;
    for ((s, y, rho), alpha) in memory.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.dot(&r);
        r += (alpha - beta) * s;
    }
    -r
}

/// Minimize `f` over the box from `x0` (projected if infeasible).
///
/// Accepted iterates are non-increasing in `f`; every evaluation is feasible;
/// the result is deterministic for identical inputs. A non-finite objective
/// at the starting point is an error; non-finite values encountered during
/// the search merely reject that trial step.
pub fn minimize<F>(
    f: F,
    bounds: &Bounds,
    x0: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<SolveReport>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    cfg.validate()?;
    if x0.len() != bounds.dim() {
        return Err(Error::Dimension(format!(
            "start point has {} entries, bounds have {}",
            x0.len(),
            bounds.dim()
        )));
    }

    let evals = AtomicUsize::new(0);
    let mut x = bounds.project(x0);
    let mut fx = f(&x);
    evals.fetch_add(1, Ordering::Relaxed);
    if !fx.is_finite() {
        return Err(Error::Solver(format!(
            "objective is not finite at the starting plan ({fx})"
        )));
    }

    let start = Instant::now();
    let mut memory: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut previous: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut previous_active: Option<Vec<bool>> = None;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut kkt_current = false;
    let mut converged = false;

    while iterations < cfg.max_iters {
        if let Some(budget) = cfg.time_budget {
            if start.elapsed().as_secs_f64() > budget {
                break;
            }
        }

        let g = fd_gradient(&f, &x, fx, bounds, cfg.fd_step, &evals);
        kkt = infinity_norm(&(&x - bounds.project(&(&x - &g))));
        kkt_current = true;
        if kkt <= cfg.grad_tol {
            converged = true;
            break;
        }

        let active = active_mask(&x, &g, bounds);
        if previous_active.as_deref() != Some(active.as_slice()) {
            memory.clear();
        } else if let Some((px, pg)) = &previous {
            let s = masked(&(&x - px), &active);
            let y = masked(&(&g - pg), &active);
            let sy = s.dot(&y);
            if sy > CURVATURE_TOL * s.norm() * y.norm() && cfg.memory > 0 {
                memory.push_back((s, y, 1.0 / sy));
                if memory.len() > cfg.memory {
                    memory.pop_front();
                }
            }
        }
        previous_active = Some(active.clone());

        let g_free = masked(&g, &active);
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        // First pass uses the quasi-Newton direction when available; if its
        // line search fails, the memory is dropped and plain projected
        // gradient gets one more chance before declaring a stall.
        for attempt in 0..2 {
            let (d, mut t) = if memory.is_empty() || attempt == 1 {
                (-&g_free, cfg.step_init)
            } else {
                let d = lbfgs_direction(&g_free, &memory);
                if d.dot(&g) >= 0.0 {
                    (-&g_free, cfg.step_init)
                } else {
                    (d, 1.0)
                }
            };
            for _ in 0..cfg.max_backtracks {
                let trial = bounds.project(&(&x + t * &d));
                if trial != x {
                    let ft = f(&trial);
                    evals.fetch_add(1, Ordering::Relaxed);
                    let decrease = g.dot(&(&trial - &x));
                    if ft.is_finite() && decrease <= 0.0 && ft <= fx + cfg.armijo_c * decrease {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                t *= cfg.backtrack_factor;
            }
            if accepted.is_some() || memory.is_empty() {
                break;
            }
            memory.clear();
        }

        match accepted {
            Some((xn, fn_)) => {
                previous = Some((x, g));
                x = xn;
                fx = fn_;
                kkt_current = false;
                iterations += 1;
            }
            None => break, // No feasible descent step at working precision.
        }
    }

    if !kkt_current {
        let g = fd_gradient(&f, &x, fx, bounds, cfg.fd_step, &evals);
        kkt = infinity_norm(&(&x - bounds.project(&(&x - &g))));
        converged = kkt <= cfg.grad_tol;
    }

    Ok(SolveReport {
        best_plan: x,
        best_value: fx,
        iterations,
        objective_evals: evals.into_inner(),
        kkt_residual: kkt,
        converged,
    })
}

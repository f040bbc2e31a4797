//! Box-constrained minimizer: projected BFGS with a backtracking Armijo
//! search along the projection arc, followed when BFGS stalls by a damped
//! Newton polish on a finite-difference Hessian of the exact gradient.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::ocp::ParametricObjective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Tolerance on the Euclidean norm of the projected gradient.
    pub grad_tol: f64,
    /// Infinity-norm length of the first trial step.
    pub initial_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Symmetric coefficient box `[-bound, bound]`, applied when the explicit
    /// per-coefficient bounds below are empty.
    pub bound: f64,
    /// BFGS iterations before switching to the Newton polish.
    pub bfgs_iters: usize,
    /// Central-difference step for the polish Hessian; zero disables it.
    pub hessian_step: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lower: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub upper: Vec<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 2000,
            grad_tol: 1e-8,
            initial_step: 0.05,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
            bound: f64::INFINITY,
            bfgs_iters: 300,
            hessian_step: 1e-5,
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    fn validate(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(self.grad_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "optimizer needs grad_tol > 0 and max_iters >= 1".into(),
            ));
        }
        let (lo, hi) = if self.lower.is_empty() && self.upper.is_empty() {
            (vec![-self.bound; n], vec![self.bound; n])
        } else {
            (self.lower.clone(), self.upper.clone())
        };
        if lo.len() != n || hi.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bounds have lengths {}/{}, problem has {n} variables",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("every lower bound must be below its upper bound".into()));
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub x: Vec<f64>,
    pub cost: f64,
    /// Projected-gradient norm at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub wall_time: f64,
    /// Cost at the start and after each accepted step.
    pub history: Vec<f64>,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((xi, gi), (l, h))| {
            let d = (xi - gi).clamp(*l, *h) - xi;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `cost` inside the configured box starting from `x0`.
///
/// `cost` is used for line-search trials; `cost_grad` at accepted points.
/// Evaluation errors at trial points are treated as an infinite cost.
pub fn minimize<C, G>(cost: C, cost_grad: G, x0: &[f64], cfg: &OptimizerConfig) -> Result<OptimReport>
where
    C: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    instrument::count_optimization();
    let start = Instant::now();
    let n = x0.len();
    let (lo, hi) = cfg.validate(n)?;

    let mut x = x0.to_vec();
    project(&mut x, &lo, &hi);
    let (mut f, mut g) = match cost_grad(&x) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
        _ => return Err(Error::NonFiniteCost),
    };
    let mut history = vec![f];
    let mut pg = projected_gradient_norm(&x, &g, &lo, &hi);

    // Dense inverse-Hessian approximation, row-major.
    let mut hinv = vec![0.0; n * n];
    let mut fresh = true;
    let reset = |hinv: &mut Vec<f64>, scale: f64| {
        hinv.fill(0.0);
        for i in 0..n {
            hinv[i * n + i] = scale;
        }
    };
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    reset(&mut hinv, cfg.initial_step / gmax);

    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];

    while iterations < cfg.max_iters.min(cfg.bfgs_iters) {
        if pg <= cfg.grad_tol {
            termination = Termination::Converged;
            break;
        }

        // Variables pinned at a bound with the gradient pushing outward stay
        // fixed; the quasi-Newton direction acts on the rest.
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        for i in 0..n {
            d[i] = if free[i] {
                -(0..n)
                    .filter(|&j| free[j])
                    .map(|j| hinv[i * n + j] * g[j])
                    .sum::<f64>()
            } else {
                0.0
            };
        }
        if dot(&d, &g) >= 0.0 {
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            reset(&mut hinv, cfg.initial_step / gmax);
            fresh = true;
            for i in 0..n {
                d[i] = if free[i] { -hinv[i * n + i] * g[i] } else { 0.0 };
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            for i in 0..n {
                trial[i] = x[i] + alpha * d[i];
            }
            project(&mut trial, &lo, &hi);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if decrease < 0.0 {
                if let Ok(ft) = cost(&trial) {
                    if ft.is_finite() && ft <= f + cfg.armijo * decrease {
                        accepted = Some(ft);
                        break;
                    }
                }
            }
            alpha *= cfg.backtrack;
        }

        let Some(_) = accepted else {
            if !fresh {
                // Stale curvature; retry once along steepest descent.
                let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
                reset(&mut hinv, cfg.initial_step / gmax);
                fresh = true;
                continue;
            }
            termination = Termination::LineSearchFailure;
            break;
        };

        let (f_new, g_new) = match cost_grad(&trial) {
            Ok((fv, gv)) if fv.is_finite() && gv.iter().all(|v| v.is_finite()) => (fv, gv),
            _ => {
                termination = Termination::LineSearchFailure;
                break;
            }
        };
        // Guard against the gradient evaluation disagreeing with the cheaper
        // trial evaluation beyond rounding.
        if f_new > f + 1e-12 * (1.0 + f.abs()) {
            termination = Termination::LineSearchFailure;
            break;
        }

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                reset(&mut hinv, sy / dot(&y, &y));
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            fresh = false;
        }

        x.copy_from_slice(&trial);
        f = f_new;
        g = g_new;
        history.push(f);
        pg = projected_gradient_norm(&x, &g, &lo, &hi);
        iterations += 1;
    }
    if pg <= cfg.grad_tol {
        termination = Termination::Converged;
    } else if cfg.hessian_step > 0.0 && iterations < cfg.max_iters {
        let mut state = NewtonState {
            x,
            f,
            g,
            pg,
            iterations,
            history,
        };
        termination = newton_polish(&cost, &cost_grad, &mut state, &lo, &hi, cfg);
        NewtonState {
            x,
            f,
            pg,
            iterations,
            history,
            ..
        } = state;
    }

    Ok(OptimReport {
        x,
        cost: f,
        grad_norm: pg,
        iterations,
        converged: termination == Termination::Converged,
        termination,
        wall_time: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        history,
    })
}

/// Minimizes `obj(., theta)` over its control box starting from `u0`.
pub fn optimize<O: ParametricObjective + ?Sized>(
    obj: &O,
    theta: &[f64],
    u0: &[f64],
    cfg: &OptimizerConfig,
) -> Result<OptimReport> {
    let mut cfg = cfg.clone();
    if cfg.lower.is_empty() && cfg.upper.is_empty() {
        cfg.bound = cfg.bound.min(obj.control_bound());
    }
    minimize(|u| obj.cost(u, theta), |u| obj.cost_and_gradient(u, theta), u0, &cfg)
}

struct NewtonState {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    pg: f64,
    iterations: usize,
    history: Vec<f64>,
}

/// Levenberg-damped projected Newton steps on the free variables.
fn newton_polish<C, G>(
    cost: &C,
    cost_grad: &G,
    st: &mut NewtonState,
    lo: &[f64],
    hi: &[f64],
    cfg: &OptimizerConfig,
) -> Termination
where
    C: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = st.x.len();
    let mut mu: Option<f64> = None;
    while st.iterations < cfg.max_iters {
        if st.pg <= cfg.grad_tol {
            return Termination::Converged;
        }
        let Ok(h) = fd_hessian(cost_grad, &st.x, cfg.hessian_step) else {
            return Termination::LineSearchFailure;
        };
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((st.x[i] <= lo[i] && st.g[i] > 0.0) || (st.x[i] >= hi[i] && st.g[i] < 0.0)))
            .collect();
        let k = free.len();
        // Mirror negative curvature so the model stays convex away from
        // the optimum without damping the stiff directions.
        let eig = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]).symmetric_eigen();
        let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lam = eig.eigenvalues.map(|v| v.abs().max(1e-12 * top));
        let hf = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
        let gf = DVector::from_fn(k, |a, _| -st.g[free[a]]);
        let diag_max = (0..k).map(|a| hf[(a, a)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut damping = mu.unwrap_or(1e-10 * diag_max);

        if let Some(chol) = hf.clone().cholesky() {
            // Stationary to working precision: the full Newton model
            // predicts a decrease below cost rounding.
            let predicted = 0.5 * gf.dot(&chol.solve(&gf));
            if predicted <= 1e-15 * (1.0 + st.f.abs()) {
                return Termination::Converged;
            }
        }

        let mut accepted = None;
        for _ in 0..40 {
            let mut m = hf.clone();
            for a in 0..k {
                m[(a, a)] += damping;
            }
            if let Some(chol) = m.cholesky() {
                let d = chol.solve(&gf);
                let mut trial = st.x.clone();
                for (a, &i) in free.iter().enumerate() {
                    trial[i] += d[a];
                }
                project(&mut trial, lo, hi);
                let step: Vec<f64> = trial.iter().zip(&st.x).map(|(a, b)| a - b).collect();
                let decrease = dot(&st.g, &step);
                if decrease < 0.0 {
                    if let Ok(ft) = cost(&trial) {
                        if ft.is_finite() && ft <= st.f + cfg.armijo * decrease {
                            accepted = Some(trial);
                            break;
                        }
                    }
                }
            }
            damping = (damping * 10.0).max(1e-12 * diag_max);
        }
        let Some(trial) = accepted else {
            return Termination::LineSearchFailure;
        };
        mu = Some(damping / 10.0);
        let (f_new, g_new) = match cost_grad(&trial) {
            Ok((fv, gv)) if fv.is_finite() && gv.iter().all(|v| v.is_finite()) => (fv, gv),
            _ => return Termination::LineSearchFailure,
        };
        if f_new > st.f + 1e-12 * (1.0 + st.f.abs()) {
            return Termination::LineSearchFailure;
        }
        st.x = trial;
        st.f = f_new;
        st.g = g_new;
        st.history.push(f_new);
        st.pg = projected_gradient_norm(&st.x, &st.g, lo, hi);
        st.iterations += 1;
    }
    if st.pg <= cfg.grad_tol {
        Termination::Converged
    } else {
        Termination::MaxIterations
    }
}

/// Symmetrized central-difference Jacobian of the gradient.
fn fd_hessian<G>(cost_grad: &G, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + step;
        let (_, gp) = cost_grad(&probe)?;
        probe[j] = x[j] - step;
        let (_, gm) = cost_grad(&probe)?;
        probe[j] = x[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// `H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

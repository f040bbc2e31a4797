//! The discretized optimal-control problem: hat-basis controller, parameter
//! nondimensionalization and the penalty cost with its exact gradient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::ode::{
    integrate_scheduled, integrate_with_sensitivities_scheduled, ControlledSystem, ParamSchedule,
    TimeGrid, Trajectory,
};

/// Piecewise-linear controller `u(t) = sum_i u_i phi_i(t)` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    grid: TimeGrid,
    coeffs: Vec<f64>,
}

impl Controller {
    pub fn new(grid: TimeGrid, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "controller has {} coefficients for {} nodes",
                coeffs.len(),
                grid.len()
            )));
        }
        Ok(Controller { grid, coeffs })
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        let coeffs = vec![value; grid.len()];
        Controller { grid, coeffs }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Same grid, new coefficients.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self> {
        Controller::new(self.grid.clone(), coeffs)
    }

    /// The (at most two) nonzero hat functions at `t`, as `(index, weight)`.
    /// Times outside the grid clamp to the nearest end node.
    pub fn basis_weights(&self, t: f64) -> [(usize, f64); 2] {
        let n = self.grid.n_steps();
        let h = self.grid.step();
        let s = ((t - self.grid.t0()) / h).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let w = s - i as f64;
        [(i, 1.0 - w), (i + 1, w)]
    }

    pub fn eval(&self, t: f64) -> f64 {
        let [(i, wi), (j, wj)] = self.basis_weights(t);
        // Exact at nodes: a zero weight never contributes rounding noise.
        match (wi == 0.0, wj == 0.0) {
            (false, true) => self.coeffs[i],
            (true, false) => self.coeffs[j],
            _ => wi * self.coeffs[i] + wj * self.coeffs[j],
        }
    }

    pub fn norm(&self) -> f64 {
        l2(&self.coeffs)
    }

    /// Projects every coefficient into `[-bound, bound]`.
    pub fn clamped(mut self, bound: f64) -> Self {
        for c in &mut self.coeffs {
            *c = c.clamp(-bound, bound);
        }
        self
    }
}

/// Hat function `phi_i(t)` on `grid`.
pub fn hat_basis_eval(i: usize, t: f64, grid: &TimeGrid) -> Result<f64> {
    let n = grid.n_steps();
    if i > n {
        return Err(Error::IndexOutOfRange { index: i, max: n });
    }
    let nodes = grid.nodes();
    let ti = nodes[i];
    if t == ti {
        return Ok(1.0);
    }
    if i > 0 && t >= nodes[i - 1] && t < ti {
        return Ok((t - nodes[i - 1]) / (ti - nodes[i - 1]));
    }
    if i < n && t > ti && t <= nodes[i + 1] {
        return Ok((nodes[i + 1] - t) / (nodes[i + 1] - ti));
    }
    Ok(0.0)
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Nondimensional parameters `p_i = (1 + beta0 theta_i) pbar_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    theta: Vec<f64>,
    nominal: Vec<f64>,
    beta0: f64,
}

impl ThetaVector {
    pub fn new(theta: Vec<f64>, nominal: Vec<f64>, beta0: f64) -> Result<Self> {
        if theta.len() != nominal.len() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, nominal has {}",
                theta.len(),
                nominal.len()
            )));
        }
        if !(beta0 > 0.0 && beta0.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta0 must be positive, got {beta0}")));
        }
        if let Some(t) = theta.iter().find(|t| !(-1.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("theta component {t} outside [-1, 1]")));
        }
        Ok(ThetaVector {
            theta,
            nominal,
            beta0,
        })
    }

    pub fn nominal_point(nominal: Vec<f64>, beta0: f64) -> Result<Self> {
        ThetaVector::new(vec![0.0; nominal.len()], nominal, beta0)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn dimensionalize(&self) -> Vec<f64> {
        dimensionalize(&self.theta, &self.nominal, self.beta0)
    }

    /// Inverse of [`ThetaVector::dimensionalize`].
    pub fn from_dimensional(p: &[f64], nominal: Vec<f64>, beta0: f64) -> Result<Self> {
        let theta = p
            .iter()
            .zip(&nominal)
            .map(|(pi, nom)| (pi / nom - 1.0) / beta0)
            .collect();
        ThetaVector::new(theta, nominal, beta0)
    }
}

pub fn dimensionalize(theta: &[f64], nominal: &[f64], beta0: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(nominal)
        .map(|(t, p)| (1.0 + beta0 * t) * p)
        .collect()
}

/// `-x_k(T) / scale`: maximizes the final value of one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub state: usize,
    pub scale: f64,
}

/// `weight * ((x_k(T) - target) / target)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalPenalty {
    pub state: usize,
    pub target: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Enforces `x >= bound`.
    Lower,
    /// Enforces `x <= bound`.
    Upper,
}

/// `weight * sum_k (x_i(t_k) - bound)^4 / scale^4` over violating
/// integration nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPenalty {
    pub state: usize,
    pub bound: f64,
    pub side: Side,
    pub weight: f64,
    pub scale: f64,
}

impl PathPenalty {
    fn violation(&self, x: f64) -> Option<f64> {
        let d = x - self.bound;
        match self.side {
            Side::Lower if d < 0.0 => Some(d),
            Side::Upper if d > 0.0 => Some(d),
            _ => None,
        }
    }
}

/// A fully wired penalty-form optimal-control problem. Immutable after
/// construction; cheap to clone.
#[derive(Clone)]
pub struct ProblemSpec {
    pub system: Arc<dyn ControlledSystem>,
    pub param_names: Vec<String>,
    pub nominal_params: Vec<f64>,
    pub beta0: f64,
    pub x0: Vec<f64>,
    pub integration: TimeGrid,
    pub control_grid: TimeGrid,
    pub control_bound: f64,
    pub objective: Objective,
    pub terminal: Vec<TerminalPenalty>,
    pub path: Vec<PathPenalty>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("param_names", &self.param_names)
            .field("nominal_params", &self.nominal_params)
            .field("beta0", &self.beta0)
            .field("x0", &self.x0)
            .field("integration", &self.integration)
            .field("control_grid", &self.control_grid)
            .field("objective", &self.objective)
            .field("terminal", &self.terminal)
            .field("path", &self.path)
            .finish()
    }
}

/// Cost value split by term, for reporting and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub objective: f64,
    pub terminal: Vec<f64>,
    pub path: Vec<f64>,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.objective + self.terminal.iter().sum::<f64>() + self.path.iter().sum::<f64>()
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.system.state_dim();
        if self.x0.len() != n {
            return Err(Error::Config(format!("x0 has {} entries, expected {n}", self.x0.len())));
        }
        if self.param_names.len() != self.nominal_params.len() {
            return Err(Error::Config("parameter names and nominal values disagree".into()));
        }
        if !(self.beta0 > 0.0) {
            return Err(Error::Config("beta0 must be positive".into()));
        }
        if !(self.control_bound > 0.0) {
            return Err(Error::Config("control bound must be positive".into()));
        }
        let scale_ok = |s: f64| s > 0.0 && s.is_finite();
        if !scale_ok(self.objective.scale) || self.objective.state >= n {
            return Err(Error::Config("invalid objective term".into()));
        }
        for t in &self.terminal {
            if t.weight < 0.0 || t.state >= n || t.target == 0.0 {
                return Err(Error::Config(format!("invalid terminal penalty {t:?}")));
            }
        }
        for p in &self.path {
            if p.weight < 0.0 || p.state >= n || !scale_ok(p.scale) {
                return Err(Error::Config(format!("invalid path penalty {p:?}")));
            }
        }
        Ok(())
    }

    pub fn n_controls(&self) -> usize {
        self.control_grid.len()
    }

    pub fn n_params(&self) -> usize {
        self.nominal_params.len()
    }

    pub fn controller(&self, coeffs: &[f64]) -> Result<Controller> {
        Controller::new(self.control_grid.clone(), coeffs.to_vec())
    }

    pub fn params_at(&self, theta: &[f64]) -> Vec<f64> {
        dimensionalize(theta, &self.nominal_params, self.beta0)
    }

    pub fn schedule(&self, theta: &[f64]) -> ParamSchedule {
        ParamSchedule::constant(self.params_at(theta))
    }

    /// Parameters `theta_before` before `t_switch` and `theta_after` from
    /// the first integration node at or after it.
    pub fn switching_schedule(
        &self,
        theta_before: &[f64],
        theta_after: &[f64],
        t_switch: f64,
    ) -> ParamSchedule {
        ParamSchedule::switching(
            self.params_at(theta_before),
            self.params_at(theta_after),
            t_switch,
            &self.integration,
        )
    }

    pub fn trajectory(&self, u: &Controller, schedule: &ParamSchedule) -> Result<Trajectory> {
        integrate_scheduled(self.system.as_ref(), &self.x0, &self.integration, u, schedule)
    }

    pub fn breakdown(&self, traj: &Trajectory) -> CostBreakdown {
        let xf = traj.final_state();
        let objective = -xf[self.objective.state] / self.objective.scale;
        let terminal = self
            .terminal
            .iter()
            .map(|t| {
                let r = (xf[t.state] - t.target) / t.target;
                t.weight * r * r
            })
            .collect();
        let path = self
            .path
            .iter()
            .map(|p| {
                let sum: f64 = traj
                    .states()
                    .filter_map(|x| p.violation(x[p.state]))
                    .map(|d| d.powi(4))
                    .sum();
                p.weight * sum / p.scale.powi(4)
            })
            .collect();
        CostBreakdown {
            objective,
            terminal,
            path,
        }
    }

    pub fn cost_scheduled(&self, u: &Controller, schedule: &ParamSchedule) -> Result<f64> {
        instrument::count_cost();
        let traj = self.trajectory(u, schedule)?;
        Ok(self.breakdown(&traj).total())
    }

    /// `J(u; theta)`.
    pub fn cost(&self, u: &Controller, theta: &[f64]) -> Result<f64> {
        self.cost_scheduled(u, &self.schedule(theta))
    }

    /// Cost and `dJ/du_i` assembled from the propagated sensitivities.
    /// Normalization scales are constants, so they contribute no derivative.
    pub fn cost_and_gradient_scheduled(
        &self,
        u: &Controller,
        schedule: &ParamSchedule,
    ) -> Result<(f64, Vec<f64>)> {
        instrument::count_cost();
        let traj = integrate_with_sensitivities_scheduled(
            self.system.as_ref(),
            &self.x0,
            &self.integration,
            u,
            schedule,
        )?;
        let nc = u.len();
        let last = traj.len() - 1;
        let xf = traj.final_state();
        let sf = traj.sensitivity(last).expect("sensitivities requested");
        let row = |i: usize| i * nc..(i + 1) * nc;

        let mut grad = vec![0.0; nc];
        let obj = self.objective;
        for (g, s) in grad.iter_mut().zip(&sf[row(obj.state)]) {
            *g -= s / obj.scale;
        }
        for t in &self.terminal {
            let c = 2.0 * t.weight * (xf[t.state] - t.target) / (t.target * t.target);
            for (g, s) in grad.iter_mut().zip(&sf[row(t.state)]) {
                *g += c * s;
            }
        }
        for p in &self.path {
            let c = 4.0 * p.weight / p.scale.powi(4);
            for k in 0..traj.len() {
                if let Some(d) = p.violation(traj.state(k)[p.state]) {
                    let sk = traj.sensitivity(k).unwrap();
                    let f = c * d.powi(3);
                    for (g, s) in grad.iter_mut().zip(&sk[row(p.state)]) {
                        *g += f * s;
                    }
                }
            }
        }
        Ok((self.breakdown(&traj).total(), grad))
    }

    pub fn cost_gradient(&self, u: &Controller, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.cost_and_gradient_scheduled(u, &self.schedule(theta))?.1)
    }

    /// Replaces every normalization scale by `max_k |x_i(t_k)|` over `traj`.
    pub fn with_scales_from(&self, traj: &Trajectory) -> ProblemSpec {
        let max_abs = |i: usize| {
            traj.states()
                .map(|x| x[i].abs())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE)
        };
        let mut out = self.clone();
        out.objective.scale = max_abs(out.objective.state);
        for p in &mut out.path {
            p.scale = max_abs(p.state);
        }
        out
    }
}

/// A smooth cost `J(u; theta)` with an exact gradient in `u`. The HDSA,
/// optimizer and approximation layers are generic over this.
pub trait ParametricObjective: Sync {
    fn n_controls(&self) -> usize;
    fn n_params(&self) -> usize;
    fn control_bound(&self) -> f64 {
        f64::INFINITY
    }
    fn cost(&self, u: &[f64], theta: &[f64]) -> Result<f64>;
    fn cost_and_gradient(&self, u: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl ParametricObjective for ProblemSpec {
    fn n_controls(&self) -> usize {
        ProblemSpec::n_controls(self)
    }

    fn n_params(&self) -> usize {
        ProblemSpec::n_params(self)
    }

    fn control_bound(&self) -> f64 {
        self.control_bound
    }

    fn cost(&self, u: &[f64], theta: &[f64]) -> Result<f64> {
        ProblemSpec::cost(self, &self.controller(u)?, theta)
    }

    fn cost_and_gradient(&self, u: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.cost_and_gradient_scheduled(&self.controller(u)?, &self.schedule(theta))
    }
}

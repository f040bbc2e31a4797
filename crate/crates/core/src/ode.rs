//! Fixed-step RK4 integration of controlled ODE systems, with optional
//! forward propagation of the state sensitivities `dx/du_j` with respect to
//! the nodal controller coefficients.

use crate::error::{Error, Result};
use crate::instrument;
use crate::ocp::Controller;

/// Uniform time grid `t0 < t1 < ... < T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_final: f64,
    n_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(t0.is_finite() && t_final.is_finite() && t_final > t0) {
            return Err(Error::InvalidArgument(format!(
                "time grid bounds must satisfy t0 < T, got [{t0}, {t_final}]"
            )));
        }
        let h = (t_final - t0) / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|k| t0 + k as f64 * h).collect();
        nodes[n_steps] = t_final;
        Ok(TimeGrid {
            t0,
            t_final,
            n_steps,
            nodes,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        (self.t_final - self.t0) / self.n_steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the first node at or after `t` (clamped to the last node).
    pub fn first_node_at_or_after(&self, t: f64) -> usize {
        let h = self.step();
        let raw = ((t - self.t0) / h).ceil();
        // Snap values within rounding of a node onto that node.
        let below = raw - 1.0;
        let k = if below >= 0.0 && (self.t0 + below * h - t).abs() <= 1e-9 * h.max(1.0) {
            below
        } else {
            raw
        };
        (k.max(0.0) as usize).min(self.n_steps)
    }
}

/// A controlled vector field `dx/dt = f(t, x, u; p)` with a scalar control.
///
/// Jacobians are with respect to the state and the scalar control value; the
/// integrator applies the hat-basis chain rule to reach the nodal coefficients.
pub trait ControlledSystem: Send + Sync {
    fn state_dim(&self) -> usize;

    fn rhs(&self, t: f64, x: &[f64], u: f64, p: &[f64], dx: &mut [f64]) -> Result<()>;

    /// Row-major `n x n` matrix `df/dx`.
    fn jac_x(&self, t: f64, x: &[f64], u: f64, p: &[f64], jac: &mut [f64]) -> Result<()>;

    /// `df/du`, length `n`.
    fn jac_u(&self, t: f64, x: &[f64], u: f64, p: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Parameter vector per integration step: constant, or switching once at a
/// grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSchedule {
    before: Vec<f64>,
    after: Option<(usize, Vec<f64>)>,
}

impl ParamSchedule {
    pub fn constant(p: Vec<f64>) -> Self {
        ParamSchedule {
            before: p,
            after: None,
        }
    }

    /// `before` on steps starting strictly before `t_switch`, `after` from the
    /// first grid node at or after `t_switch` onward.
    pub fn switching(before: Vec<f64>, after: Vec<f64>, t_switch: f64, grid: &TimeGrid) -> Self {
        let k = grid.first_node_at_or_after(t_switch);
        ParamSchedule {
            before,
            after: Some((k, after)),
        }
    }

    pub fn at_step(&self, k: usize) -> &[f64] {
        match &self.after {
            Some((switch, p)) if k >= *switch => p,
            _ => &self.before,
        }
    }
}

/// State history on a time grid, optionally with `dx(t_k)/du_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    n: usize,
    n_controls: usize,
    states: Vec<f64>,
    sens: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.n)
    }

    pub fn has_sensitivities(&self) -> bool {
        self.sens.is_some()
    }

    /// Number of controller coefficients the sensitivities are taken against.
    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    /// Row-major `n x (N+1)` matrix `dx(t_k)/du` at node `k`.
    pub fn sensitivity(&self, k: usize) -> Option<&[f64]> {
        let block = self.n * self.n_controls;
        self.sens.as_ref().map(|s| &s[k * block..(k + 1) * block])
    }
}

/// Integrates `system` over `grid` with classical RK4.
pub fn integrate(
    system: &dyn ControlledSystem,
    x0: &[f64],
    grid: &TimeGrid,
    controller: &Controller,
    params: &[f64],
) -> Result<Trajectory> {
    integrate_scheduled(
        system,
        x0,
        grid,
        controller,
        &ParamSchedule::constant(params.to_vec()),
    )
}

pub fn integrate_scheduled(
    system: &dyn ControlledSystem,
    x0: &[f64],
    grid: &TimeGrid,
    controller: &Controller,
    params: &ParamSchedule,
) -> Result<Trajectory> {
    let n = system.state_dim();
    check_inputs(n, x0, grid, controller)?;
    let h = grid.step();
    let mut states = Vec::with_capacity(n * grid.len());
    states.extend_from_slice(x0);

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    for k in 0..grid.n_steps() {
        let t = grid.nodes()[k];
        let p = params.at_step(k);
        let t_half = t + 0.5 * h;
        let t_next = grid.nodes()[k + 1];

        eval_rhs(system, t, &x, controller.eval(t), p, &mut k1)?;
        axpy_into(&mut tmp, &x, 0.5 * h, &k1);
        eval_rhs(system, t_half, &tmp, controller.eval(t_half), p, &mut k2)?;
        axpy_into(&mut tmp, &x, 0.5 * h, &k2);
        eval_rhs(system, t_half, &tmp, controller.eval(t_half), p, &mut k3)?;
        axpy_into(&mut tmp, &x, h, &k3);
        eval_rhs(system, t_next, &tmp, controller.eval(t_next), p, &mut k4)?;

        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_next });
        }
        states.extend_from_slice(&x);
    }

    Ok(Trajectory {
        grid: grid.clone(),
        n,
        n_controls: controller.len(),
        states,
        sens: None,
    })
}

/// Integrates the state together with `S = dx/du`, where
/// `S' = (df/dx) S + (df/du) phi(t)^T` and `S(t0) = 0`.
pub fn integrate_with_sensitivities(
    system: &dyn ControlledSystem,
    x0: &[f64],
    grid: &TimeGrid,
    controller: &Controller,
    params: &[f64],
) -> Result<Trajectory> {
    integrate_with_sensitivities_scheduled(
        system,
        x0,
        grid,
        controller,
        &ParamSchedule::constant(params.to_vec()),
    )
}

pub fn integrate_with_sensitivities_scheduled(
    system: &dyn ControlledSystem,
    x0: &[f64],
    grid: &TimeGrid,
    controller: &Controller,
    params: &ParamSchedule,
) -> Result<Trajectory> {
    let n = system.state_dim();
    check_inputs(n, x0, grid, controller)?;
    let nc = controller.len();
    let block = n * nc;
    let h = grid.step();

    let mut states = Vec::with_capacity(n * grid.len());
    let mut sens = Vec::with_capacity(block * grid.len());
    states.extend_from_slice(x0);
    sens.resize(block, 0.0);

    let mut stage = AugmentedStage::new(n, nc);
    let mut x = x0.to_vec();
    let mut s = vec![0.0; block];
    let mut kx = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut ks = [
        vec![0.0; block],
        vec![0.0; block],
        vec![0.0; block],
        vec![0.0; block],
    ];
    let mut xt = vec![0.0; n];
    let mut st = vec![0.0; block];

    for k in 0..grid.n_steps() {
        let t = grid.nodes()[k];
        let p = params.at_step(k);
        let times = [t, t + 0.5 * h, t + 0.5 * h, grid.nodes()[k + 1]];
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];

        for stage_idx in 0..4 {
            if stage_idx == 0 {
                xt.copy_from_slice(&x);
                st.copy_from_slice(&s);
            } else {
                let (prev_x, prev_s) = (&kx[stage_idx - 1], &ks[stage_idx - 1]);
                axpy_into(&mut xt, &x, offsets[stage_idx], prev_x);
                axpy_into(&mut st, &s, offsets[stage_idx], prev_s);
            }
            let (kx_out, ks_out) = (&mut kx[stage_idx], &mut ks[stage_idx]);
            stage.eval(
                system,
                times[stage_idx],
                &xt,
                &st,
                controller,
                p,
                kx_out,
                ks_out,
            )?;
        }

        for i in 0..n {
            x[i] += h / 6.0 * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
        }
        for i in 0..block {
            s[i] += h / 6.0 * (ks[0][i] + 2.0 * ks[1][i] + 2.0 * ks[2][i] + ks[3][i]);
        }
        if x.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                t: grid.nodes()[k + 1],
            });
        }
        states.extend_from_slice(&x);
        sens.extend_from_slice(&s);
    }

    Ok(Trajectory {
        grid: grid.clone(),
        n,
        n_controls: nc,
        states,
        sens: Some(sens),
    })
}

struct AugmentedStage {
    n: usize,
    nc: usize,
    jx: Vec<f64>,
    ju: Vec<f64>,
}

impl AugmentedStage {
    fn new(n: usize, nc: usize) -> Self {
        AugmentedStage {
            n,
            nc,
            jx: vec![0.0; n * n],
            ju: vec![0.0; n],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &mut self,
        system: &dyn ControlledSystem,
        t: f64,
        x: &[f64],
        s: &[f64],
        controller: &Controller,
        p: &[f64],
        dx: &mut [f64],
        ds: &mut [f64],
    ) -> Result<()> {
        let (n, nc) = (self.n, self.nc);
        let u = controller.eval(t);
        eval_rhs(system, t, x, u, p, dx)?;
        system.jac_x(t, x, u, p, &mut self.jx)?;
        system.jac_u(t, x, u, p, &mut self.ju)?;

        // ds = Jx * S
        for i in 0..n {
            let row = &mut ds[i * nc..(i + 1) * nc];
            row.fill(0.0);
            for l in 0..n {
                let a = self.jx[i * n + l];
                if a == 0.0 {
                    continue;
                }
                let src = &s[l * nc..(l + 1) * nc];
                for (r, v) in row.iter_mut().zip(src) {
                    *r += a * v;
                }
            }
        }
        // + Ju * phi(t)^T; at most two hat functions are nonzero.
        for (j, w) in controller.basis_weights(t) {
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                ds[i * nc + j] += self.ju[i] * w;
            }
        }
        Ok(())
    }
}

fn eval_rhs(
    system: &dyn ControlledSystem,
    t: f64,
    x: &[f64],
    u: f64,
    p: &[f64],
    dx: &mut [f64],
) -> Result<()> {
    instrument::count_dynamics();
    system.rhs(t, x, u, p, dx)
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

fn check_inputs(n: usize, x0: &[f64], grid: &TimeGrid, controller: &Controller) -> Result<()> {
    if x0.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "initial state has {} entries, system has {n}",
            x0.len()
        )));
    }
    let cg = controller.grid();
    let tol = 1e-9 * (grid.t_final() - grid.t0()).abs().max(1.0);
    if cg.t0() > grid.t0() + tol || cg.t_final() < grid.t_final() - tol {
        return Err(Error::InvalidArgument(
            "controller grid does not span the integration interval".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dx/dt = a x + b u with constant matrices.
    struct Linear {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl ControlledSystem for Linear {
        fn state_dim(&self) -> usize {
            self.b.len()
        }
        fn rhs(&self, _t: f64, x: &[f64], u: f64, _p: &[f64], dx: &mut [f64]) -> Result<()> {
            let n = self.b.len();
            for i in 0..n {
                dx[i] = (0..n).map(|l| self.a[i * n + l] * x[l]).sum::<f64>() + self.b[i] * u;
            }
            Ok(())
        }
        fn jac_x(&self, _t: f64, _x: &[f64], _u: f64, _p: &[f64], jac: &mut [f64]) -> Result<()> {
            jac.copy_from_slice(&self.a);
            Ok(())
        }
        fn jac_u(&self, _t: f64, _x: &[f64], _u: f64, _p: &[f64], out: &mut [f64]) -> Result<()> {
            out.copy_from_slice(&self.b);
            Ok(())
        }
    }

    fn controller(t_final: f64, n: usize, value: f64) -> Controller {
        Controller::constant(TimeGrid::new(0.0, t_final, n).unwrap(), value)
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let sys = Linear {
            a: vec![0.0; 4],
            b: vec![0.0; 2],
        };
        let grid = TimeGrid::new(0.0, 3.0, 17).unwrap();
        let traj = integrate(&sys, &[1.0, 2.0], &grid, &controller(3.0, 4, 0.7), &[]).unwrap();
        for x in traj.states() {
            assert_eq!(x, &[1.0, 2.0]);
        }
    }

    #[test]
    fn exponential_decay() {
        let sys = Linear {
            a: vec![-1.0],
            b: vec![0.0],
        };
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let traj = integrate(&sys, &[1.0], &grid, &controller(1.0, 2, 0.0), &[]).unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let sys = Linear {
            a: vec![-1.0],
            b: vec![0.0],
        };
        let max_err = |n: usize| {
            let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
            let traj = integrate(&sys, &[1.0], &grid, &controller(1.0, 2, 0.0), &[]).unwrap();
            grid.nodes()
                .iter()
                .zip(traj.states())
                .map(|(t, x)| (x[0] - (-t).exp()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = max_err(10) / max_err(20);
        assert!((ratio - 16.0).abs() <= 0.3 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn hat_integral_sensitivity() {
        // x' = u, so dx(T)/du_j is the integral of the j-th hat function.
        let sys = Linear {
            a: vec![0.0],
            b: vec![1.0],
        };
        let grid = TimeGrid::new(0.0, 10.0, 200).unwrap();
        let ctrl = controller(10.0, 5, 0.3);
        let traj = integrate_with_sensitivities(&sys, &[0.0], &grid, &ctrl, &[]).unwrap();
        let s = traj.sensitivity(traj.len() - 1).unwrap();
        let spacing = 2.0;
        for (j, v) in s.iter().enumerate() {
            let expected = if j == 0 || j == 5 { spacing / 2.0 } else { spacing };
            assert!((v - expected).abs() < 1e-8, "j={j}: {v}");
        }
    }

    #[test]
    fn control_free_dynamics_has_zero_sensitivity() {
        let sys = Linear {
            a: vec![-0.5, 0.1, 0.0, -0.2],
            b: vec![0.0, 0.0],
        };
        let grid = TimeGrid::new(0.0, 2.0, 40).unwrap();
        let traj =
            integrate_with_sensitivities(&sys, &[1.0, -1.0], &grid, &controller(2.0, 4, 1.0), &[])
                .unwrap();
        for k in 0..traj.len() {
            assert!(traj.sensitivity(k).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn sensitivities_are_exact_for_control_linear_dynamics() {
        let sys = Linear {
            a: vec![-0.3, 0.4, -0.2, -0.1],
            b: vec![0.5, 1.0],
        };
        let grid = TimeGrid::new(0.0, 5.0, 80).unwrap();
        let cg = TimeGrid::new(0.0, 5.0, 6).unwrap();
        let u = Controller::new(cg.clone(), vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.4, 0.9]).unwrap();
        let zero = Controller::constant(cg, 0.0);
        let alpha = 1.7;
        let scaled = Controller::new(u.grid().clone(), u.coeffs().iter().map(|c| alpha * c).collect())
            .unwrap();
        let x0 = [0.0, 0.0];
        let base = integrate_with_sensitivities(&sys, &x0, &grid, &zero, &[]).unwrap();
        let moved = integrate(&sys, &x0, &grid, &scaled, &[]).unwrap();
        let s = base.sensitivity(base.len() - 1).unwrap();
        for i in 0..2 {
            let predicted: f64 = (0..u.len()).map(|j| s[i * u.len() + j] * alpha * u.coeffs()[j]).sum();
            let actual = moved.final_state()[i] - base.final_state()[i];
            assert!((predicted - actual).abs() <= 1e-9 * actual.abs().max(1e-12));
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = Linear {
            a: vec![1e30],
            b: vec![0.0],
        };
        let grid = TimeGrid::new(0.0, 10.0, 10).unwrap();
        let err = integrate(&sys, &[1.0], &grid, &controller(10.0, 2, 0.0), &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }));
    }

    #[test]
    fn switching_schedule_snaps_to_node() {
        let grid = TimeGrid::new(0.0, 4000.0, 400).unwrap();
        let s = ParamSchedule::switching(vec![0.0], vec![1.0], 2000.0, &grid);
        assert_eq!(s.at_step(199), &[0.0]);
        assert_eq!(s.at_step(200), &[1.0]);
        assert_eq!(grid.first_node_at_or_after(2005.0), 201);
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(0.0, 4000.0, 400).unwrap();
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(*g.nodes().last().unwrap(), 4000.0);
        for w in g.nodes().windows(2) {
            assert!(((w[1] - w[0]) - 10.0).abs() < 1e-12 * 10.0);
        }
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }
}

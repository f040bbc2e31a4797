//! Two-degree-of-freedom space-shuttle reentry: point-mass dynamics in the
//! vertical plane, controlled by angle of attack.
//!
//! State `(h, phi, v, gamma)`: altitude (ft), longitude (rad), speed (ft/s)
//! and flight-path angle (rad). The perturbable parameter vector is
//! `[m, rho0, a0, a1, b0, b1, b2]`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{Objective, PathPenalty, ProblemSpec, Side, TerminalPenalty};
use crate::ode::{ControlledSystem, TimeGrid, Trajectory};

pub const PARAM_NAMES: [&str; 7] = ["m", "rho0", "a0", "a1", "b0", "b1", "b2"];

/// Surface area (ft^2).
pub const REF_AREA: f64 = 2690.0;
/// Density scale height (ft).
pub const SCALE_HEIGHT: f64 = 23800.0;
/// Earth radius (ft).
pub const EARTH_RADIUS: f64 = 20902900.0;
/// Gravitational parameter (ft^3/s^2).
pub const MU: f64 = 0.14076539e17;

pub const VELOCITY_FLOOR: f64 = 1e-6;

const DEG_PER_RAD: f64 = 180.0 / PI;

pub const H0: f64 = 260000.0;
pub const V0: f64 = 25600.0;
pub const GAMMA0: f64 = -PI / 180.0;
pub const H_FINAL: f64 = 80000.0;
pub const V_FINAL: f64 = 2500.0;
pub const GAMMA_FINAL: f64 = -5.0 * PI / 180.0;
pub const GAMMA_LIMIT: f64 = 89.0 * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuttleState {
    pub h: f64,
    pub phi: f64,
    pub v: f64,
    pub gamma: f64,
}

impl ShuttleState {
    pub fn from_slice(x: &[f64]) -> Self {
        ShuttleState {
            h: x[0],
            phi: x[1],
            v: x[2],
            gamma: x[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.h, self.phi, self.v, self.gamma]
    }

    pub fn initial() -> Self {
        ShuttleState {
            h: H0,
            phi: 0.0,
            v: V0,
            gamma: GAMMA0,
        }
    }

    pub fn phi_degrees(&self) -> f64 {
        self.phi * DEG_PER_RAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuttleParams {
    /// Mass (slug).
    pub m: f64,
    /// Sea-level density (lb/ft^3).
    pub rho0: f64,
    pub a0: f64,
    pub a1: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for ShuttleParams {
    fn default() -> Self {
        ShuttleParams {
            m: 20300.0 / 32.173,
            rho0: 0.002378,
            a0: -0.20704,
            a1: 0.029244,
            b0: 0.07854,
            b1: -0.61592e-2,
            b2: 0.621408e-3,
        }
    }
}

impl ShuttleParams {
    pub fn from_slice(p: &[f64]) -> Result<Self> {
        match *p {
            [m, rho0, a0, a1, b0, b1, b2] => Ok(ShuttleParams {
                m,
                rho0,
                a0,
                a1,
                b0,
                b1,
                b2,
            }),
            _ => Err(Error::ShapeMismatch(format!(
                "shuttle takes 7 parameters, got {}",
                p.len()
            ))),
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.m, self.rho0, self.a0, self.a1, self.b0, self.b1, self.b2]
    }

    pub fn lift_coefficient(&self, u: f64) -> f64 {
        self.a0 + self.a1 * u * DEG_PER_RAD
    }

    pub fn drag_coefficient(&self, u: f64) -> f64 {
        let ud = u * DEG_PER_RAD;
        self.b0 + self.b1 * ud + self.b2 * ud * ud
    }
}

/// Quantities shared by the dynamics and both Jacobians.
struct Aero {
    sin_g: f64,
    cos_g: f64,
    r: f64,
    g: f64,
    /// Dynamic pressure times area, `0.5 S rho v^2`.
    qs: f64,
    drag: f64,
    lift: f64,
}

fn aero(x: &[f64], u: f64, p: &ShuttleParams) -> Result<Aero> {
    let (h, v, gamma) = (x[0], x[2], x[3]);
    if !x.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFiniteState { t: f64::NAN });
    }
    if v < VELOCITY_FLOOR {
        return Err(Error::DegenerateVelocity { v });
    }
    let rho = p.rho0 * (-h / SCALE_HEIGHT).exp();
    let r = EARTH_RADIUS + h;
    let qs = 0.5 * REF_AREA * rho * v * v;
    Ok(Aero {
        sin_g: gamma.sin(),
        cos_g: gamma.cos(),
        r,
        g: MU / (r * r),
        qs,
        drag: p.drag_coefficient(u) * qs,
        lift: p.lift_coefficient(u) * qs,
    })
}

pub fn shuttle_dynamics(_t: f64, x: &[f64], u: f64, p: &ShuttleParams) -> Result<[f64; 4]> {
    let a = aero(x, u, p)?;
    let v = x[2];
    let dx = [
        v * a.sin_g,
        v / a.r * a.cos_g,
        -a.drag / p.m - a.g * a.sin_g,
        a.lift / (p.m * v) + a.cos_g * (v / a.r - a.g / v),
    ];
    if dx.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFiniteState { t: _t });
    }
    Ok(dx)
}

/// Row-major `df/dx`.
pub fn shuttle_jac_x(_t: f64, x: &[f64], u: f64, p: &ShuttleParams) -> Result<[f64; 16]> {
    let a = aero(x, u, p)?;
    let (v, m, hr) = (x[2], p.m, SCALE_HEIGHT);
    let (s, c, r, g) = (a.sin_g, a.cos_g, a.r, a.g);
    // d rho/dh = -rho/hr, dr/dh = 1, dg/dh = -2g/r.
    Ok([
        0.0,
        0.0,
        s,
        v * c,
        -v * c / (r * r),
        0.0,
        c / r,
        -v * s / r,
        a.drag / (m * hr) + 2.0 * g * s / r,
        0.0,
        -2.0 * a.drag / (m * v),
        -g * c,
        -a.lift / (m * v * hr) + c * (-v / (r * r) + 2.0 * g / (r * v)),
        0.0,
        a.lift / (m * v * v) + c * (1.0 / r + g / (v * v)),
        -s * (v / r - g / v),
    ])
}

pub fn shuttle_jac_u(_t: f64, x: &[f64], u: f64, p: &ShuttleParams) -> Result<[f64; 4]> {
    let a = aero(x, u, p)?;
    let v = x[2];
    let ud = u * DEG_PER_RAD;
    Ok([
        0.0,
        0.0,
        -a.qs / p.m * (p.b1 + 2.0 * p.b2 * ud) * DEG_PER_RAD,
        a.qs / (p.m * v) * p.a1 * DEG_PER_RAD,
    ])
}

/// [`ControlledSystem`] adapter taking the parameter vector as a slice.
#[derive(Debug, Clone, Copy, Default)]
pub struct Shuttle;

impl ControlledSystem for Shuttle {
    fn state_dim(&self) -> usize {
        4
    }

    fn rhs(&self, t: f64, x: &[f64], u: f64, p: &[f64], dx: &mut [f64]) -> Result<()> {
        let d = shuttle_dynamics(t, x, u, &ShuttleParams::from_slice(p)?)
            .map_err(|e| with_time(e, t))?;
        dx.copy_from_slice(&d);
        Ok(())
    }

    fn jac_x(&self, t: f64, x: &[f64], u: f64, p: &[f64], jac: &mut [f64]) -> Result<()> {
        jac.copy_from_slice(&shuttle_jac_x(t, x, u, &ShuttleParams::from_slice(p)?)?);
        Ok(())
    }

    fn jac_u(&self, t: f64, x: &[f64], u: f64, p: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&shuttle_jac_u(t, x, u, &ShuttleParams::from_slice(p)?)?);
        Ok(())
    }
}

fn with_time(e: Error, t: f64) -> Error {
    match e {
        Error::NonFiniteState { .. } => Error::NonFiniteState { t },
        other => other,
    }
}

/// Penalty weights `beta_1..beta_7`: three terminal targets (h, v, gamma)
/// then the path constraints h >= 0, v >= 1, gamma >= -89 deg, gamma <= 89 deg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights(pub [f64; 7]);

impl Default for PenaltyWeights {
    fn default() -> Self {
        PenaltyWeights([3.0, 3.0, 0.3, 1e3, 1e3, 1e3, 1e3])
    }
}

/// Normalization scales: longitude for the objective, then altitude,
/// speed and flight-path angle for the path penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub h: f64,
    pub phi: f64,
    pub v: f64,
    pub gamma: f64,
}

impl Scales {
    /// `max_k |x_i(t_k)|` for each scaled state over `traj`.
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let max_abs = |i: usize| {
            traj.states()
                .map(|x| x[i].abs())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE)
        };
        Scales {
            h: max_abs(0),
            phi: max_abs(1),
            v: max_abs(2),
            gamma: max_abs(3),
        }
    }
}

impl Default for Scales {
    fn default() -> Self {
        Scales {
            h: H0,
            phi: 1.0,
            v: V0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuttleConfig {
    /// Final time (s).
    pub t_final: f64,
    /// RK4 steps over the horizon.
    pub n_steps: usize,
    /// Controller intervals `N` (the controller has `N + 1` nodes).
    pub n_controls: usize,
    pub beta0: f64,
    pub weights: PenaltyWeights,
    pub scales: Scales,
    pub control_bound: f64,
    pub params: ShuttleParams,
}

impl Default for ShuttleConfig {
    fn default() -> Self {
        ShuttleConfig {
            t_final: 2000.0,
            n_steps: 400,
            n_controls: 20,
            beta0: 0.1,
            weights: PenaltyWeights::default(),
            scales: Scales::default(),
            control_bound: PI / 2.0,
            params: ShuttleParams::default(),
        }
    }
}

pub fn shuttle_problem(cfg: &ShuttleConfig) -> Result<ProblemSpec> {
    if !(cfg.t_final > 0.0) || cfg.n_steps == 0 || cfg.n_controls == 0 {
        return Err(Error::Config(
            "t_final, n_steps and n_controls must be positive".into(),
        ));
    }
    if cfg.weights.0.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("penalty weights must be nonnegative".into()));
    }
    let [b1, b2, b3, b4, b5, b6, b7] = cfg.weights.0;
    let sc = cfg.scales;
    let spec = ProblemSpec {
        system: Arc::new(Shuttle),
        param_names: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        nominal_params: cfg.params.to_vec(),
        beta0: cfg.beta0,
        x0: ShuttleState::initial().to_array().to_vec(),
        integration: TimeGrid::new(0.0, cfg.t_final, cfg.n_steps)?,
        control_grid: TimeGrid::new(0.0, cfg.t_final, cfg.n_controls)?,
        control_bound: cfg.control_bound,
        objective: Objective {
            state: 1,
            scale: sc.phi,
        },
        terminal: vec![
            TerminalPenalty {
                state: 0,
                target: H_FINAL,
                weight: b1,
            },
            TerminalPenalty {
                state: 2,
                target: V_FINAL,
                weight: b2,
            },
            TerminalPenalty {
                state: 3,
                target: GAMMA_FINAL,
                weight: b3,
            },
        ],
        path: vec![
            PathPenalty {
                state: 0,
                bound: 0.0,
                side: Side::Lower,
                weight: b4,
                scale: sc.h,
            },
            PathPenalty {
                state: 2,
                bound: 1.0,
                side: Side::Lower,
                weight: b5,
                scale: sc.v,
            },
            PathPenalty {
                state: 3,
                bound: -GAMMA_LIMIT,
                side: Side::Lower,
                weight: b6,
                scale: sc.gamma,
            },
            PathPenalty {
                state: 3,
                bound: GAMMA_LIMIT,
                side: Side::Upper,
                weight: b7,
                scale: sc.gamma,
            },
        ],
    };
    spec.validate()?;
    Ok(spec)
}

/// Relative terminal residuals `(h, v, gamma)` of a final state.
pub fn terminal_residuals(xf: &[f64]) -> [f64; 3] {
    [
        (xf[0] - H_FINAL) / H_FINAL,
        (xf[2] - V_FINAL) / V_FINAL,
        (xf[3] - GAMMA_FINAL) / GAMMA_FINAL,
    ]
}

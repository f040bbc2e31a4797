//! Post-optimality sensitivity toolkit for in-transit replanning.
//!
//! A discretized optimal-control problem is solved once offline. Hyper-
//! differential sensitivities `D = du*/dtheta` are then precomputed across the
//! parameter box, screened with derivative-based global sensitivity
//! measures, and stored on a grid. After an in-flight parameter change the
//! re-optimized controller is approximated by a forward-Euler homotopy that
//! only interpolates the stored sensitivities.

pub mod approx;
pub mod error;
pub mod gsa;
pub mod hdsa;
pub mod instrument;
pub mod ocp;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod shuttle;

pub use error::{Error, Result};
pub use ocp::{Controller, ParametricObjective, ProblemSpec, ThetaVector};
pub use ode::{ControlledSystem, ParamSchedule, TimeGrid, Trajectory};

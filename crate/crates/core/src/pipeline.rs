//! End-to-end experiment driver: nominal solve, screening, grid precompute,
//! in-flight parameter changes and replanning sweeps.
//!
//! Every stage persists its result under `out_dir` so later stages (and the
//! CLI) can resume from disk. Outputs that feed determinism checks never
//! contain wall-clock data; timings go to separate files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{
    build_jacobian_grid, homotopy_approx, linear_approx, load_grid, save_grid, GridSettings,
    HomotopyConfig, JacobianGrid, NodeStatus,
};
use crate::error::{Error, Result};
use crate::gsa::{dgsm_estimate, qmc_samples, screen, trace_covariance, ScreeningReport};
use crate::hdsa::{hdsa, HdsaSettings, SensitivityMatrix};
use crate::instrument::Counters;
use crate::ocp::ProblemSpec;
use crate::optim::{optimize, OptimReport, OptimizerConfig};
use crate::shuttle::{shuttle_problem, terminal_residuals, Scales, ShuttleConfig};

pub const NOMINAL_FILE: &str = "nominal.json";
pub const SCREENING_FILE: &str = "screening.json";
pub const GRID_FILE: &str = "grid.rjgd";
pub const FULL_GRID_FILE: &str = "grid_full.rjgd";
pub const GRID_LOG_FILE: &str = "grid_log.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "histogram.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Perturb only the screened-important parameters.
    Reduced,
    /// Perturb all parameters and compare against the reduced replans.
    Full,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Mode::Reduced),
            "full" => Ok(Mode::Full),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected full or reduced"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    /// QMC sample count `M`.
    pub samples: usize,
    pub threshold: f64,
    pub max_failed_fraction: f64,
    /// Keep at most this many important parameters (largest bounds first).
    pub max_reduced_dims: Option<usize>,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            samples: 200,
            threshold: 0.1,
            max_failed_fraction: 0.2,
            max_reduced_dims: Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per dimension of the reduced grid.
    pub nodes: usize,
    /// Nodes per dimension of the all-parameter grid built in full mode.
    pub full_nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { nodes: 5, full_nodes: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub draws: usize,
    /// Time of the parameter jump (s).
    pub t_change: f64,
    pub histogram_bins: usize,
    /// Threshold on `||u_opt - u_IS||` for the success probability.
    pub success_tol: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            draws: 100,
            t_change: 1000.0,
            histogram_bins: 20,
            success_tol: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    /// Constant controller value the nominal solve starts from.
    pub initial_guess: f64,
    pub problem: ShuttleConfig,
    pub optimizer: OptimizerConfig,
    pub hdsa: HdsaSettings,
    pub homotopy: HomotopyConfig,
    pub screening: ScreeningConfig,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Reduced,
            out_dir: PathBuf::from("out"),
            initial_guess: 0.3,
            problem: ShuttleConfig::default(),
            optimizer: OptimizerConfig::default(),
            hdsa: HdsaSettings::default(),
            homotopy: HomotopyConfig::default(),
            screening: ScreeningConfig::default(),
            grid: GridConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t_final = self.problem.t_final;
        if !(0.0..=t_final).contains(&self.sweep.t_change) {
            return Err(Error::Config(format!(
                "t_change {} outside [0, {t_final}]",
                self.sweep.t_change
            )));
        }
        if self.sweep.draws == 0 {
            return Err(Error::Config("sweep needs at least one draw".into()));
        }
        if self.screening.samples < 2 {
            return Err(Error::Config("screening needs at least two samples".into()));
        }
        if !(0.0..=1.0).contains(&self.screening.max_failed_fraction) {
            return Err(Error::Config("max_failed_fraction must lie in [0, 1]".into()));
        }
        if self.screening.max_reduced_dims == Some(0) {
            return Err(Error::Config("max_reduced_dims must be positive".into()));
        }
        if self.grid.nodes < 2 || self.grid.full_nodes < 2 {
            return Err(Error::Config("grids need at least two nodes per dimension".into()));
        }
        if self.homotopy.steps == 0 {
            return Err(Error::Config("homotopy needs at least one step".into()));
        }
        if self.sweep.histogram_bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if !(self.initial_guess.abs() <= self.problem.control_bound) {
            return Err(Error::Config("initial guess outside the control box".into()));
        }
        Ok(())
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// The nominal optimum and the scales frozen from its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalSolution {
    pub u: Vec<f64>,
    pub scales: Scales,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub final_state: Vec<f64>,
    /// Relative misses of the terminal targets `(h, v, gamma)`.
    pub terminal_residuals: [f64; 3],
}

impl NominalSolution {
    pub fn norm(&self) -> f64 {
        norm(&self.u)
    }

    /// The problem with this solution's scales frozen in.
    pub fn problem(&self, cfg: &ExperimentConfig) -> Result<ProblemSpec> {
        let mut problem = cfg.problem.clone();
        problem.scales = self.scales;
        shuttle_problem(&problem)
    }
}

fn scales_at(spec: &ProblemSpec, u: &[f64], theta: &[f64]) -> Result<Scales> {
    let traj = spec.trajectory(&spec.controller(u)?, &spec.schedule(theta))?;
    Ok(Scales::from_trajectory(&traj))
}

/// Solves the nominal problem in two passes: scales from the initial guess,
/// then scales from the first optimum, frozen for everything downstream.
pub fn solve_nominal(cfg: &ExperimentConfig) -> Result<NominalSolution> {
    let mut problem = cfg.problem.clone();
    let spec = shuttle_problem(&problem)?;
    let zeros = vec![0.0; spec.n_params()];
    let u0 = vec![cfg.initial_guess; spec.n_controls()];

    problem.scales = scales_at(&spec, &u0, &zeros)?;
    let first = optimize(&shuttle_problem(&problem)?, &zeros, &u0, &cfg.optimizer)?;

    problem.scales = scales_at(&spec, &first.x, &zeros)?;
    let spec = shuttle_problem(&problem)?;
    let report = optimize(&spec, &zeros, &first.x, &cfg.optimizer)?;
    if !report.converged {
        return Err(Error::OptimizationFailed(format!(
            "nominal solve stopped with {:?} after {} iterations, cost {}, gradient norm {:e}",
            report.termination, report.iterations, report.cost, report.grad_norm
        )));
    }
    let initial_cost = spec.cost(&spec.controller(&u0)?, &zeros)?;
    let traj = spec.trajectory(&spec.controller(&report.x)?, &spec.schedule(&zeros))?;
    let final_state = traj.final_state().to_vec();
    Ok(NominalSolution {
        terminal_residuals: terminal_residuals(&final_state),
        final_state,
        u: report.x,
        scales: problem.scales,
        cost: report.cost,
        initial_cost,
        iterations: first.iterations + report.iterations,
        grad_norm: report.grad_norm,
        converged: report.converged,
    })
}

pub fn run_nominal(cfg: &ExperimentConfig) -> Result<NominalSolution> {
    let nominal = solve_nominal(cfg)?;
    write_json(&cfg.path(NOMINAL_FILE), &nominal)?;
    Ok(nominal)
}

pub fn load_nominal(cfg: &ExperimentConfig) -> Result<NominalSolution> {
    read_json(&cfg.path(NOMINAL_FILE))
}

/// Sensitivities at the nominal optimum for every parameter.
pub fn nominal_sensitivities(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    nominal: &NominalSolution,
) -> Result<SensitivityMatrix> {
    let p = spec.n_params();
    let columns: Vec<usize> = (0..p).collect();
    hdsa(spec, &nominal.u, &vec![0.0; p], &columns, &cfg.hdsa)
}

/// DGSMs and Sobol bounds from optimize+HDSA at `M` QMC points on
/// `[-1, 1]^P`. Each sample starts from the clamped first-order prediction.
pub fn screen_parameters(cfg: &ExperimentConfig, nominal: &NominalSolution) -> Result<ScreeningReport> {
    let spec = nominal.problem(cfg)?;
    let p = spec.n_params();
    let columns: Vec<usize> = (0..p).collect();
    let zeros = vec![0.0; p];
    let d0 = nominal_sensitivities(cfg, &spec, nominal)?;
    let bound = spec.control_bound;
    let points = qmc_samples(p, cfg.screening.samples)?;

    let outcomes: Vec<Option<(Vec<f64>, SensitivityMatrix)>> = points
        .par_iter()
        .map(|theta| {
            let warm = linear_approx(&nominal.u, &d0, &zeros, theta, bound).ok()?;
            let report = optimize(&spec, theta, &warm, &cfg.optimizer).ok()?;
            if !report.converged {
                return None;
            }
            let d = hdsa(&spec, &report.x, theta, &columns, &cfg.hdsa).ok()?;
            Some((report.x, d))
        })
        .collect();

    let total = outcomes.len();
    let (u_samples, d_samples): (Vec<_>, Vec<_>) = outcomes.into_iter().flatten().unzip();
    let failed = total - u_samples.len();
    if failed as f64 > cfg.screening.max_failed_fraction * total as f64 || u_samples.len() < 2 {
        return Err(Error::TooManyFailedSamples { failed, total });
    }
    let dgsm = dgsm_estimate(&d_samples)?;
    let trace = trace_covariance(&u_samples)?;
    let mut report = screen(spec.param_names.clone(), dgsm, trace, cfg.screening.threshold, (-1.0, 1.0))?;
    report.samples_used = u_samples.len();
    report.samples_failed = failed;
    Ok(report)
}

pub fn run_screening(cfg: &ExperimentConfig, nominal: &NominalSolution) -> Result<ScreeningReport> {
    let report = screen_parameters(cfg, nominal)?;
    write_json(&cfg.path(SCREENING_FILE), &report)?;
    if report.important.is_empty() {
        return Err(Error::EmptyImportantSet);
    }
    Ok(report)
}

pub fn load_screening(cfg: &ExperimentConfig) -> Result<ScreeningReport> {
    read_json(&cfg.path(SCREENING_FILE))
}

/// Important parameters, capped at `max_reduced_dims` by bound, ascending.
pub fn active_dims(cfg: &ExperimentConfig, screening: &ScreeningReport) -> Result<Vec<usize>> {
    let cap = cfg.screening.max_reduced_dims.unwrap_or(usize::MAX);
    let mut dims: Vec<usize> = screening
        .ranking
        .iter()
        .copied()
        .filter(|j| screening.important.contains(j))
        .take(cap)
        .collect();
    if dims.is_empty() {
        return Err(Error::EmptyImportantSet);
    }
    dims.sort_unstable();
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLog {
    pub dims: Vec<usize>,
    pub nodes: Vec<NodeStatus>,
    pub failed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Precomputed {
    pub grid: JacobianGrid,
    /// All-parameter grid, built in full mode only.
    pub full_grid: Option<JacobianGrid>,
}

fn build_logged(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    nominal: &NominalSolution,
    dims: &[usize],
    nodes: usize,
) -> Result<(JacobianGrid, GridLog)> {
    let settings = GridSettings {
        nodes_per_dim: nodes,
        optimizer: cfg.optimizer.clone(),
        hdsa: cfg.hdsa.clone(),
    };
    let (grid, log) = build_jacobian_grid(spec, &nominal.u, dims, &settings)?;
    let failed = grid.missing_nodes();
    Ok((
        grid,
        GridLog {
            dims: dims.to_vec(),
            nodes: log,
            failed,
        },
    ))
}

/// Builds and saves the reduced grid (and the all-parameter grid in full
/// mode). Failed nodes are kept as gaps; if any exist the grids and log are
/// still written and `NodeSolveFailure` names the first one.
pub fn run_precompute(
    cfg: &ExperimentConfig,
    nominal: &NominalSolution,
    screening: &ScreeningReport,
) -> Result<Precomputed> {
    let spec = nominal.problem(cfg)?;
    let dims = active_dims(cfg, screening)?;
    let (grid, log) = build_logged(cfg, &spec, nominal, &dims, cfg.grid.nodes)?;
    save_grid(&grid, &cfg.path(GRID_FILE))?;
    let mut logs = vec![log];
    let full_grid = if cfg.mode == Mode::Full {
        let all: Vec<usize> = (0..spec.n_params()).collect();
        let (full, log) = build_logged(cfg, &spec, nominal, &all, cfg.grid.full_nodes)?;
        save_grid(&full, &cfg.path(FULL_GRID_FILE))?;
        logs.push(log);
        Some(full)
    } else {
        None
    };
    write_json(&cfg.path(GRID_LOG_FILE), &logs)?;
    if let Some(&node) = logs.iter().flat_map(|l| &l.failed).next() {
        return Err(Error::NodeSolveFailure(node));
    }
    Ok(Precomputed { grid, full_grid })
}

pub fn load_precomputed(cfg: &ExperimentConfig, grid_path: Option<&Path>) -> Result<Precomputed> {
    let grid = load_grid(&grid_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.path(GRID_FILE)))?;
    let full_grid = match cfg.mode {
        Mode::Full => Some(load_grid(&cfg.path(FULL_GRID_FILE))?),
        Mode::Reduced => None,
    };
    Ok(Precomputed { grid, full_grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Reopt,
    Linear,
    Interpolated,
}

/// One method's replan after a parameter change.
#[derive(Debug, Clone, PartialEq)]
pub struct Replan {
    pub method: Method,
    /// Nominal coefficients before the splice node, replanned after.
    pub u: Vec<f64>,
    /// Cost of the realized trajectory (parameters jump at `t_change`).
    pub cost: f64,
    /// Seconds spent computing the replan, excluding the evaluation.
    pub wall_time: f64,
    pub converged: bool,
    /// Model evaluations made while computing the replan.
    pub counters: Counters,
}

/// Everything needed to replan after a parameter change.
pub struct Replanner {
    pub spec: ProblemSpec,
    pub u_star: Vec<f64>,
    /// Nominal sensitivities, one column per parameter.
    pub d0: SensitivityMatrix,
    pub grid: JacobianGrid,
    pub full_grid: Option<JacobianGrid>,
    pub t_change: f64,
    /// First controller node at or after `t_change`.
    pub splice: usize,
    pub optimizer: OptimizerConfig,
    pub homotopy: HomotopyConfig,
}

impl Replanner {
    pub fn new(cfg: &ExperimentConfig, nominal: &NominalSolution, pre: Precomputed) -> Result<Self> {
        let spec = nominal.problem(cfg)?;
        let d0 = nominal_sensitivities(cfg, &spec, nominal)?;
        let splice = spec.control_grid.first_node_at_or_after(cfg.sweep.t_change);
        let mut homotopy = cfg.homotopy.clone();
        homotopy.bound = homotopy.bound.min(spec.control_bound);
        for g in std::iter::once(&pre.grid).chain(&pre.full_grid) {
            if g.nominal_u.len() != nominal.u.len() {
                return Err(Error::ShapeMismatch("grid and nominal controller disagree".into()));
            }
        }
        Ok(Replanner {
            u_star: nominal.u.clone(),
            d0,
            grid: pre.grid,
            full_grid: pre.full_grid,
            t_change: cfg.sweep.t_change,
            splice,
            optimizer: cfg.optimizer.clone(),
            homotopy,
            spec,
        })
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Nominal coefficients before the splice node, `u` from it onward.
    pub fn spliced(&self, u: &[f64]) -> Vec<f64> {
        self.u_star[..self.splice]
            .iter()
            .chain(&u[self.splice..])
            .copied()
            .collect()
    }

    /// Cost of flying `u` with nominal parameters before `t_change` and
    /// `theta1` from then on.
    pub fn realized_cost(&self, u: &[f64], theta1: &[f64]) -> Result<f64> {
        let zeros = vec![0.0; self.n_params()];
        let schedule = self.spec.switching_schedule(&zeros, theta1, self.t_change);
        self.spec.cost_scheduled(&self.spec.controller(u)?, &schedule)
    }

    fn grid_for(&self, dims: &[usize]) -> Result<&JacobianGrid> {
        std::iter::once(&self.grid)
            .chain(&self.full_grid)
            .find(|g| g.dims == dims)
            .ok_or_else(|| Error::InvalidArgument(format!("no grid over parameters {dims:?}")))
    }

    /// Replans for the change `0 -> theta1` seen only through `dims`;
    /// the realized cost uses all of `theta1`.
    pub fn replan(&self, method: Method, theta1: &[f64], dims: &[usize]) -> Result<Replan> {
        if theta1.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, expected {}",
                theta1.len(),
                self.n_params()
            )));
        }
        let reduced: Vec<f64> = dims.iter().map(|&j| theta1[j]).collect();
        let mut masked = vec![0.0; self.n_params()];
        for &j in dims {
            masked[j] = theta1[j];
        }
        let bound = self.homotopy.bound;
        let before = Counters::snapshot();
        let start = Instant::now();
        let (u, converged) = match method {
            Method::Reopt => {
                let r: OptimReport = optimize(&self.spec, &masked, &self.u_star, &self.optimizer)?;
                (r.x, r.converged)
            }
            Method::Linear => {
                let d = self.d0.select_columns(dims)?;
                let zeros = vec![0.0; dims.len()];
                (linear_approx(&self.u_star, &d, &zeros, &reduced, bound)?, true)
            }
            Method::Interpolated => {
                let grid = self.grid_for(dims)?;
                let zeros = vec![0.0; dims.len()];
                (homotopy_approx(&self.u_star, &zeros, &reduced, &self.homotopy, grid)?, true)
            }
        };
        let wall_time = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let counters = Counters::since(before);
        let u = self.spliced(&u);
        let cost = self.realized_cost(&u, theta1)?;
        Ok(Replan {
            method,
            u,
            cost,
            wall_time,
            converged,
            counters,
        })
    }
}

/// Deterministic per-draw outcome. Wall times live in [`DrawTiming`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub draw: usize,
    pub theta: Vec<f64>,
    /// Realized cost of keeping the nominal controller.
    pub cost_nominal: f64,
    pub cost_opt: f64,
    pub cost_lin: f64,
    pub cost_is: f64,
    pub err_lin: f64,
    pub err_is: f64,
    pub opt_converged: bool,
    pub is_model_calls: u64,
    /// Converged reopt beats both approximations up to `1e-6 |J|`.
    pub dominates: bool,
    pub full: Option<FullComparison>,
    /// Empty, or the errors of the methods that failed.
    pub status: String,
}

/// Full-mode columns: replans that see every parameter, against the
/// reduced ones.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullComparison {
    pub cost_opt7: f64,
    pub cost_lin7: f64,
    pub cost_is7: f64,
    pub err_lin7: f64,
    pub err_is7: f64,
    pub opt7_vs_opt3: f64,
    pub is7_vs_is3: f64,
    pub lin7_vs_lin3: f64,
    pub opt7_converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawTiming {
    pub draw: usize,
    pub reopt: f64,
    pub linear: f64,
    pub interpolated: f64,
    pub reopt7: Option<f64>,
    pub linear7: Option<f64>,
    pub interpolated7: Option<f64>,
}

struct Triple {
    opt: Option<Replan>,
    lin: Option<Replan>,
    is: Option<Replan>,
}

fn run_triple(rp: &Replanner, theta: &[f64], dims: &[usize], errors: &mut Vec<String>, tag: &str) -> Triple {
    let mut one = |m: Method| match rp.replan(m, theta, dims) {
        Ok(r) => Some(r),
        Err(e) => {
            errors.push(format!("{tag}{m:?}: {e}"));
            None
        }
    };
    Triple {
        opt: one(Method::Reopt),
        lin: one(Method::Linear),
        is: one(Method::Interpolated),
    }
}

fn cost_of(r: &Option<Replan>) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.cost)
}

fn time_of(r: &Option<Replan>) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.wall_time)
}

fn gap(a: &Option<Replan>, b: &Option<Replan>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => distance(&a.u, &b.u),
        _ => f64::NAN,
    }
}

/// Runs every method for one parameter change. In full mode `theta1`
/// perturbs all parameters; the reduced replans see only `active`.
pub fn simulate_change(
    rp: &Replanner,
    draw: usize,
    theta1: &[f64],
    active: &[usize],
    mode: Mode,
) -> Result<(SweepRecord, DrawTiming)> {
    if theta1.len() != rp.n_params() {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} entries, expected {}",
            theta1.len(),
            rp.n_params()
        )));
    }
    let mut errors = Vec::new();
    let cost_nominal = rp.realized_cost(&rp.u_star, theta1).unwrap_or_else(|e| {
        errors.push(format!("nominal: {e}"));
        f64::NAN
    });
    let t = run_triple(rp, theta1, active, &mut errors, "");
    let opt_converged = t.opt.as_ref().is_some_and(|r| r.converged);
    let tol = 1e-6 * cost_of(&t.opt).abs();
    let dominates = opt_converged
        && cost_of(&t.opt) <= cost_of(&t.lin) + tol
        && cost_of(&t.opt) <= cost_of(&t.is) + tol;
    let mut timing = DrawTiming {
        draw,
        reopt: time_of(&t.opt),
        linear: time_of(&t.lin),
        interpolated: time_of(&t.is),
        ..Default::default()
    };
    let full = if mode == Mode::Full {
        let all: Vec<usize> = (0..rp.n_params()).collect();
        let f = run_triple(rp, theta1, &all, &mut errors, "full ");
        timing.reopt7 = Some(time_of(&f.opt));
        timing.linear7 = Some(time_of(&f.lin));
        timing.interpolated7 = Some(time_of(&f.is));
        Some(FullComparison {
            cost_opt7: cost_of(&f.opt),
            cost_lin7: cost_of(&f.lin),
            cost_is7: cost_of(&f.is),
            err_lin7: gap(&f.opt, &f.lin),
            err_is7: gap(&f.opt, &f.is),
            opt7_vs_opt3: gap(&f.opt, &t.opt),
            is7_vs_is3: gap(&f.is, &t.is),
            lin7_vs_lin3: gap(&f.lin, &t.lin),
            opt7_converged: f.opt.as_ref().is_some_and(|r| r.converged),
        })
    } else {
        None
    };
    let record = SweepRecord {
        draw,
        theta: theta1.to_vec(),
        cost_nominal,
        cost_opt: cost_of(&t.opt),
        cost_lin: cost_of(&t.lin),
        cost_is: cost_of(&t.is),
        err_lin: gap(&t.opt, &t.lin),
        err_is: gap(&t.opt, &t.is),
        opt_converged,
        is_model_calls: t.is.as_ref().map_or(0, |r| r.counters.dynamics + r.counters.costs),
        dominates,
        full,
        status: errors.join("; "),
    };
    Ok((record, timing))
}

/// Parameter change for sweep draw `draw`: uniform on `[-1, 1]` for the
/// perturbed parameters, zero elsewhere. Each draw has its own stream.
pub fn draw_theta(seed: u64, draw: usize, n_params: usize, perturbed: &[usize]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    let mut theta = vec![0.0; n_params];
    for &j in perturbed {
        theta[j] = rng.gen_range(-1.0..=1.0);
    }
    theta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Over the finite values only; `None` if there are none.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stats> {
        let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Stats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: Mode,
    pub draws: usize,
    pub nominal_norm: f64,
    pub success_tol: f64,
    /// Draws where at least one method failed.
    pub failed_draws: usize,
    pub reopt_not_converged: usize,
    /// Converged draws where reopt did not dominate both approximations.
    pub dominance_violations: usize,
    /// `P(||u_opt - u_IS|| < tol)` with `tol` absolute.
    pub p_is_within_tol: f64,
    /// Same with `tol` relative to the nominal controller norm.
    pub p_is_within_tol_relative: f64,
    pub p_lin_within_tol: f64,
    pub p_lin_within_tol_relative: f64,
    pub metrics: BTreeMap<String, Stats>,
}

fn fraction(records: &[SweepRecord], f: impl Fn(&SweepRecord) -> bool) -> f64 {
    records.iter().filter(|r| f(r)).count() as f64 / records.len().max(1) as f64
}

pub fn summarize(records: &[SweepRecord], mode: Mode, nominal_norm: f64, tol: f64) -> SweepSummary {
    let mut metrics = BTreeMap::new();
    for (name, _) in METRICS {
        let column = records.iter().filter_map(|r| metric(r, name));
        if let Some(s) = Stats::of(column) {
            metrics.insert(name.to_string(), s);
        }
    }
    let rel = tol * nominal_norm;
    SweepSummary {
        mode,
        draws: records.len(),
        nominal_norm,
        success_tol: tol,
        failed_draws: records.iter().filter(|r| !r.status.is_empty()).count(),
        reopt_not_converged: records.iter().filter(|r| !r.opt_converged).count(),
        dominance_violations: records.iter().filter(|r| r.opt_converged && !r.dominates).count(),
        p_is_within_tol: fraction(records, |r| r.err_is < tol),
        p_is_within_tol_relative: fraction(records, |r| r.err_is < rel),
        p_lin_within_tol: fraction(records, |r| r.err_lin < tol),
        p_lin_within_tol_relative: fraction(records, |r| r.err_lin < rel),
        metrics,
    }
}

/// Summary metrics: name and description.
pub const METRICS: [(&str, &str); 17] = [
    ("cost_nominal", "J, nominal controller kept"),
    ("cost_opt", "J(u_opt)"),
    ("cost_lin", "J(u_lin)"),
    ("cost_is", "J(u_IS)"),
    ("cost_diff_lin", "J(u_lin) - J(u_opt)"),
    ("cost_diff_is", "J(u_IS) - J(u_opt)"),
    ("err_lin", "||u_opt - u_lin||"),
    ("err_is", "||u_opt - u_IS||"),
    ("cost_opt7", "J(u_opt7)"),
    ("cost_lin7", "J(u_lin7)"),
    ("cost_is7", "J(u_IS7)"),
    ("err_lin7", "||u_opt7 - u_lin7||"),
    ("err_is7", "||u_opt7 - u_IS7||"),
    ("opt7_vs_opt3", "||u_opt7 - u_opt3||"),
    ("is7_vs_is3", "||u_IS7 - u_IS3||"),
    ("lin7_vs_lin3", "||u_lin7 - u_lin3||"),
    ("is_model_calls", "model calls during u_IS"),
];

pub fn metric(r: &SweepRecord, name: &str) -> Option<f64> {
    let f = r.full.as_ref();
    Some(match name {
        "cost_nominal" => r.cost_nominal,
        "cost_opt" => r.cost_opt,
        "cost_lin" => r.cost_lin,
        "cost_is" => r.cost_is,
        "cost_diff_lin" => r.cost_lin - r.cost_opt,
        "cost_diff_is" => r.cost_is - r.cost_opt,
        "err_lin" => r.err_lin,
        "err_is" => r.err_is,
        "cost_opt7" => f?.cost_opt7,
        "cost_lin7" => f?.cost_lin7,
        "cost_is7" => f?.cost_is7,
        "err_lin7" => f?.err_lin7,
        "err_is7" => f?.err_is7,
        "opt7_vs_opt3" => f?.opt7_vs_opt3,
        "is7_vs_is3" => f?.is7_vs_is3,
        "lin7_vs_lin3" => f?.lin7_vs_lin3,
        "is_model_calls" => r.is_model_calls as f64,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over the finite range of `values`.
    pub fn of(values: impl IntoIterator<Item = f64>, bins: usize) -> Histogram {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        let bins = bins.max(1);
        let (lo, hi) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if v.is_empty() {
            return Histogram {
                edges: vec![],
                counts: vec![],
            };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for x in v {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Histogram data for cost differences and error norms against reopt.
pub fn histograms(records: &[SweepRecord], bins: usize) -> BTreeMap<String, Histogram> {
    ["cost_diff_is", "cost_diff_lin", "err_is", "err_lin"]
        .into_iter()
        .map(|name| {
            let column = records.iter().filter_map(|r| metric(r, name));
            (name.to_string(), Histogram::of(column, bins))
        })
        .collect()
}

/// Shortest round-trip text; exponent form outside a readable range.
fn fmt_f64(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn record_header(names: &[String], full: bool) -> Vec<String> {
    let mut h = vec!["draw".to_string()];
    h.extend(names.iter().map(|n| format!("theta_{n}")));
    h.extend(
        [
            "cost_nominal",
            "cost_opt",
            "cost_lin",
            "cost_is",
            "err_lin",
            "err_is",
            "opt_converged",
            "is_model_calls",
            "dominates",
        ]
        .map(String::from),
    );
    if full {
        h.extend(
            [
                "cost_opt7",
                "cost_lin7",
                "cost_is7",
                "err_lin7",
                "err_is7",
                "opt7_vs_opt3",
                "is7_vs_is3",
                "lin7_vs_lin3",
                "opt7_converged",
            ]
            .map(String::from),
        );
    }
    h.push("status".into());
    h
}

fn record_row(r: &SweepRecord) -> Vec<String> {
    let mut row = vec![r.draw.to_string()];
    row.extend(r.theta.iter().map(|&x| fmt_f64(x)));
    row.extend([r.cost_nominal, r.cost_opt, r.cost_lin, r.cost_is, r.err_lin, r.err_is].map(fmt_f64));
    row.push(r.opt_converged.to_string());
    row.push(r.is_model_calls.to_string());
    row.push(r.dominates.to_string());
    if let Some(f) = &r.full {
        row.extend(
            [
                f.cost_opt7,
                f.cost_lin7,
                f.cost_is7,
                f.err_lin7,
                f.err_is7,
                f.opt7_vs_opt3,
                f.is7_vs_is3,
                f.lin7_vs_lin3,
            ]
            .map(fmt_f64),
        );
        row.push(f.opt7_converged.to_string());
    }
    row.push(r.status.clone());
    row
}

pub fn write_records(path: &Path, names: &[String], records: &[SweepRecord]) -> Result<()> {
    let full = records.first().is_some_and(|r| r.full.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(record_header(names, full))?;
    for r in records {
        w.write_record(record_row(r))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_text(path, &String::from_utf8_lossy(&bytes))
}

pub fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(file);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Config(format!("records file lacks column {name}")));
    let theta_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("theta_")).collect();
    let full = col("cost_opt7").is_some();
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let text = |name: &str| -> Result<&str> { Ok(row.get(need(name)?).unwrap_or("")) };
        let num = |name: &str| -> Result<f64> {
            text(name)?
                .parse()
                .map_err(|_| Error::Config(format!("bad number in column {name}")))
        };
        let flag = |name: &str| -> Result<bool> { Ok(text(name)? == "true") };
        let theta = theta_cols
            .iter()
            .map(|&i| row[i].parse().map_err(|_| Error::Config("bad theta entry".into())))
            .collect::<Result<Vec<f64>>>()?;
        let full_part = if full {
            Some(FullComparison {
                cost_opt7: num("cost_opt7")?,
                cost_lin7: num("cost_lin7")?,
                cost_is7: num("cost_is7")?,
                err_lin7: num("err_lin7")?,
                err_is7: num("err_is7")?,
                opt7_vs_opt3: num("opt7_vs_opt3")?,
                is7_vs_is3: num("is7_vs_is3")?,
                lin7_vs_lin3: num("lin7_vs_lin3")?,
                opt7_converged: flag("opt7_converged")?,
            })
        } else {
            None
        };
        out.push(SweepRecord {
            draw: num("draw")? as usize,
            theta,
            cost_nominal: num("cost_nominal")?,
            cost_opt: num("cost_opt")?,
            cost_lin: num("cost_lin")?,
            cost_is: num("cost_is")?,
            err_lin: num("err_lin")?,
            err_is: num("err_is")?,
            opt_converged: flag("opt_converged")?,
            is_model_calls: num("is_model_calls")? as u64,
            dominates: flag("dominates")?,
            full: full_part,
            status: text("status")?.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub mean_reopt: f64,
    pub mean_linear: f64,
    pub mean_interpolated: f64,
    /// Mean reopt time over mean interpolated-step time.
    pub speedup: f64,
    pub draws: Vec<DrawTiming>,
}

impl TimingSummary {
    pub fn of(draws: Vec<DrawTiming>) -> Self {
        let mean = |f: fn(&DrawTiming) -> f64| Stats::of(draws.iter().map(f)).map_or(f64::NAN, |s| s.mean);
        let mean_reopt = mean(|d| d.reopt);
        let mean_interpolated = mean(|d| d.interpolated);
        TimingSummary {
            mean_reopt,
            mean_linear: mean(|d| d.linear),
            mean_interpolated,
            speedup: mean_reopt / mean_interpolated,
            draws,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub summary: SweepSummary,
    pub histograms: BTreeMap<String, Histogram>,
    pub timing: TimingSummary,
}

/// Draws the sweep's parameter changes and replans each with every method,
/// concurrently. Output order follows the draw index.
pub fn sweep(
    cfg: &ExperimentConfig,
    rp: &Replanner,
    active: &[usize],
    nominal_norm: f64,
) -> Result<SweepOutcome> {
    let p = rp.n_params();
    let perturbed: Vec<usize> = match cfg.mode {
        Mode::Full => (0..p).collect(),
        Mode::Reduced => active.to_vec(),
    };
    let results: Vec<(SweepRecord, DrawTiming)> = (0..cfg.sweep.draws)
        .into_par_iter()
        .map(|k| simulate_change(rp, k, &draw_theta(cfg.seed, k, p, &perturbed), active, cfg.mode))
        .collect::<Result<_>>()?;
    let (records, timings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(SweepOutcome {
        summary: summarize(&records, cfg.mode, nominal_norm, cfg.sweep.success_tol),
        histograms: histograms(&records, cfg.sweep.histogram_bins),
        timing: TimingSummary::of(timings),
        records,
    })
}

pub fn write_sweep(cfg: &ExperimentConfig, names: &[String], out: &SweepOutcome) -> Result<()> {
    write_records(&cfg.path(RECORDS_FILE), names, &out.records)?;
    write_json(&cfg.path(SUMMARY_FILE), &out.summary)?;
    write_json(&cfg.path(HISTOGRAM_FILE), &out.histograms)?;
    write_json(&cfg.path(TIMING_FILE), &out.timing)
}

/// Sweep from the persisted nominal, screening and grid files.
pub fn run_sweep(cfg: &ExperimentConfig, grid_path: Option<&Path>) -> Result<SweepOutcome> {
    let nominal = load_nominal(cfg)?;
    let pre = load_precomputed(cfg, grid_path)?;
    let active = pre.grid.dims.clone();
    let rp = Replanner::new(cfg, &nominal, pre)?;
    let out = sweep(cfg, &rp, &active, nominal.norm())?;
    write_sweep(cfg, &rp.spec.param_names, &out)?;
    Ok(out)
}

/// Every stage in order, each persisted under `out_dir`.
pub fn run_all(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let nominal = run_nominal(cfg)?;
    let screening = run_screening(cfg, &nominal)?;
    let pre = run_precompute(cfg, &nominal, &screening)?;
    let active = pre.grid.dims.clone();
    let rp = Replanner::new(cfg, &nominal, pre)?;
    let out = sweep(cfg, &rp, &active, nominal.norm())?;
    write_sweep(cfg, &rp.spec.param_names, &out)?;
    Ok(out)
}

/// Recomputes the summary and histograms from `records.csv` and renders the
/// screening and sweep tables as text.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    let nominal = load_nominal(cfg)?;
    let records = read_records(&cfg.path(RECORDS_FILE))?;
    let mode = if records.iter().any(|r| r.full.is_some()) {
        Mode::Full
    } else {
        Mode::Reduced
    };
    let summary = summarize(&records, mode, nominal.norm(), cfg.sweep.success_tol);
    write_json(&cfg.path(SUMMARY_FILE), &summary)?;
    write_json(&cfg.path(HISTOGRAM_FILE), &histograms(&records, cfg.sweep.histogram_bins))?;

    let mut text = String::new();
    if let Ok(s) = load_screening(cfg) {
        text.push_str(&screening_table(&s));
        text.push('\n');
    }
    text.push_str(&summary_table(&summary));
    Ok(text)
}

pub fn screening_table(s: &ScreeningReport) -> String {
    let mut t = format!(
        "{:<8} {:>12} {:>12}  important\n",
        "param", "DGSM", "bound"
    );
    for &j in &s.ranking {
        let mark = if s.important.contains(&j) { "yes" } else { "" };
        t.push_str(&format!(
            "{:<8} {:>12.4e} {:>12.4e}  {mark}\n",
            s.names[j], s.dgsm[j], s.bounds[j]
        ));
    }
    t.push_str(&format!(
        "trace {:.4e}, {} samples used, {} failed\n",
        s.trace_gamma, s.samples_used, s.samples_failed
    ));
    t
}

pub fn summary_table(s: &SweepSummary) -> String {
    let mut t = format!(
        "{:?} sweep, {} draws, nominal norm {:.4}\n{:<14} {:>12} {:>12} {:>12} {:>12}  quantity\n",
        s.mode, s.draws, s.nominal_norm, "metric", "mean", "median", "min", "max"
    );
    for (name, desc) in METRICS {
        if let Some(m) = s.metrics.get(name) {
            t.push_str(&format!(
                "{:<14} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}  {desc}\n",
                name, m.mean, m.median, m.min, m.max
            ));
        }
    }
    t.push_str(&format!(
        "P(err_is < {tol}) = {:.3} absolute, {:.3} relative to the nominal norm\n",
        s.p_is_within_tol,
        s.p_is_within_tol_relative,
        tol = s.success_tol
    ));
    t.push_str(&format!(
        "failed draws {}, reopt not converged {}, dominance violations {}\n",
        s.failed_draws, s.reopt_not_converged, s.dominance_violations
    ));
    t
}

//! Fast controller updates after a parameter change: the first-order Taylor
//! step, a forward-Euler homotopy over theta, and a precomputed grid of
//! sensitivity matrices queried by multilinear interpolation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hdsa::{hdsa, HdsaSettings, SensitivityMatrix};
use crate::ocp::ParametricObjective;
use crate::optim::{optimize, OptimizerConfig};

pub const GRID_MAGIC: &[u8; 4] = b"RJGD";
pub const GRID_FORMAT_VERSION: u32 = 1;

/// Tolerance for queries sitting on the outer faces of the grid.
const EDGE_TOL: f64 = 1e-12;

fn clamp_all(u: &mut [f64], bound: f64) {
    for v in u {
        *v = v.clamp(-bound, bound);
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn step_of(theta0: &[f64], theta1: &[f64]) -> Result<Vec<f64>> {
    if theta0.len() != theta1.len() {
        return Err(Error::ShapeMismatch(format!(
            "theta0 has {} entries, theta1 has {}",
            theta0.len(),
            theta1.len()
        )));
    }
    Ok(theta1.iter().zip(theta0).map(|(b, a)| b - a).collect())
}

/// `u* + D (theta1 - theta0)`, clamped to `|u| <= bound`.
pub fn linear_approx(
    u_star: &[f64],
    d: &SensitivityMatrix,
    theta0: &[f64],
    theta1: &[f64],
    bound: f64,
) -> Result<Vec<f64>> {
    if d.rows() != u_star.len() {
        return Err(Error::ShapeMismatch(format!(
            "controller has {} coefficients, D has {} rows",
            u_star.len(),
            d.rows()
        )));
    }
    let du = d.apply(&step_of(theta0, theta1)?)?;
    let mut u: Vec<f64> = u_star.iter().zip(&du).map(|(a, b)| a + b).collect();
    clamp_all(&mut u, bound);
    Ok(u)
}

/// Supplies `D(u, theta)` along a homotopy path. `theta` is in the
/// provider's own (possibly reduced) coordinates.
pub trait JacobianProvider: Sync {
    fn jacobian(&self, u: &[f64], theta: &[f64]) -> Result<SensitivityMatrix>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianSource {
    Direct,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomotopyConfig {
    /// Euler steps `M_h`.
    pub steps: usize,
    pub source: JacobianSource,
    /// Evaluate `D` at the current iterate `u_m` (true) or keep `u*` fixed
    /// and vary only `theta` (false). Only matters for direct sources.
    pub reintegrate: bool,
    pub bound: f64,
}

impl Default for HomotopyConfig {
    fn default() -> Self {
        HomotopyConfig {
            steps: 16,
            source: JacobianSource::Grid,
            reintegrate: true,
            bound: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Forward-Euler integration of `du/dt = D(u, theta(t)) (theta1 - theta0)`
/// for `t` in `[0, 1]`, then a clamp to the control box.
pub fn homotopy_approx<P: JacobianProvider + ?Sized>(
    u_star: &[f64],
    theta0: &[f64],
    theta1: &[f64],
    cfg: &HomotopyConfig,
    provider: &P,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("homotopy needs at least one step".into()));
    }
    let dtheta = step_of(theta0, theta1)?;
    let h = 1.0 / cfg.steps as f64;
    let mut u = u_star.to_vec();
    let mut theta = theta0.to_vec();
    for m in 0..cfg.steps {
        let t = m as f64 * h;
        for (i, th) in theta.iter_mut().enumerate() {
            *th = theta0[i] + t * dtheta[i];
        }
        let at = if cfg.reintegrate { &u[..] } else { u_star };
        let d = provider.jacobian(at, &theta)?;
        if d.rows() != u.len() {
            return Err(Error::ShapeMismatch(format!(
                "controller has {} coefficients, D has {} rows",
                u.len(),
                d.rows()
            )));
        }
        let du = d.apply(&dtheta)?;
        for (v, s) in u.iter_mut().zip(&du) {
            *v += h * s;
        }
    }
    clamp_all(&mut u, cfg.bound);
    Ok(u)
}

/// HDSA evaluated on demand. Reduced coordinates are embedded into the full
/// parameter vector `base` at `columns`.
pub struct DirectHdsa<'a, O: ParametricObjective + ?Sized> {
    pub objective: &'a O,
    pub columns: Vec<usize>,
    pub base: Vec<f64>,
    pub settings: HdsaSettings,
}

impl<O: ParametricObjective + ?Sized> DirectHdsa<'_, O> {
    fn embed(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.columns.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reduced coordinates for {} columns",
                theta.len(),
                self.columns.len()
            )));
        }
        let mut full = self.base.clone();
        for (&c, &v) in self.columns.iter().zip(theta) {
            full[c] = v;
        }
        Ok(full)
    }
}

impl<O: ParametricObjective + ?Sized> JacobianProvider for DirectHdsa<'_, O> {
    fn jacobian(&self, u: &[f64], theta: &[f64]) -> Result<SensitivityMatrix> {
        hdsa(self.objective, u, &self.embed(theta)?, &self.columns, &self.settings)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub beta0: f64,
    pub nominal_params: Vec<f64>,
}

/// Sensitivity matrices on a tensor grid over the reduced parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianGrid {
    /// Full-parameter index of each grid dimension.
    pub dims: Vec<usize>,
    /// Sorted node coordinates per dimension.
    pub node_coords: Vec<Vec<f64>>,
    /// One entry per node in row-major order (last dimension fastest);
    /// `None` marks a failed node solve.
    pub payload: Vec<Option<SensitivityMatrix>>,
    pub nominal_u: Vec<f64>,
    pub meta: GridMeta,
}

impl JacobianGrid {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.iter().map(Vec::len).product()
    }

    fn shape(&self) -> Vec<usize> {
        self.node_coords.iter().map(Vec::len).collect()
    }

    /// Multi-index of a flat node index.
    pub fn node_index(&self, mut flat: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        for k in (0..shape.len()).rev() {
            idx[k] = flat % shape[k];
            flat /= shape[k];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(self.shape())
            .fold(0, |acc, (&i, n)| acc * n + i)
    }

    /// Reduced theta of a node.
    pub fn node_theta(&self, flat: usize) -> Vec<f64> {
        self.node_index(flat)
            .iter()
            .zip(&self.node_coords)
            .map(|(&i, c)| c[i])
            .collect()
    }

    pub fn missing_nodes(&self) -> Vec<usize> {
        (0..self.payload.len()).filter(|&i| self.payload[i].is_none()).collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidGrid("grid has no dimensions".into()));
        }
        if self.node_coords.len() != self.dims.len() {
            return Err(Error::InvalidGrid("one coordinate array per dimension required".into()));
        }
        for c in &self.node_coords {
            if c.len() < 2 || c.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidGrid(
                    "each dimension needs at least two strictly increasing coordinates".into(),
                ));
            }
        }
        if self.payload.len() != self.n_nodes() {
            return Err(Error::InvalidGrid(format!(
                "{} payload entries for {} nodes",
                self.payload.len(),
                self.n_nodes()
            )));
        }
        let want = (self.nominal_u.len(), self.dims.len());
        if let Some(d) = self.payload.iter().flatten().find(|d| d.shape() != want) {
            return Err(Error::InvalidGrid(format!(
                "payload matrix is {:?}, expected {want:?}",
                d.shape()
            )));
        }
        Ok(())
    }
}

/// `m` equally spaced coordinates spanning `[-1, 1]`.
pub fn uniform_coords(m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| {
            if i == m - 1 {
                1.0
            } else {
                -1.0 + 2.0 * i as f64 / (m - 1) as f64
            }
        })
        .collect()
}

/// Entrywise multilinear interpolation over the enclosing cell.
pub fn interpolate(grid: &JacobianGrid, theta: &[f64]) -> Result<SensitivityMatrix> {
    let d = grid.dims.len();
    if theta.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "query has {} coordinates, grid has {d} dimensions",
            theta.len()
        )));
    }
    // Lower cell index and upper weight per dimension.
    let mut cell = Vec::with_capacity(d);
    for (k, (&x, c)) in theta.iter().zip(&grid.node_coords).enumerate() {
        let (lo, hi) = (c[0], c[c.len() - 1]);
        if !(x >= lo - EDGE_TOL && x <= hi + EDGE_TOL) {
            return Err(Error::OutOfGridBounds(format!(
                "coordinate {k} = {x} outside [{lo}, {hi}]"
            )));
        }
        let x = x.clamp(lo, hi);
        let i = c.partition_point(|&v| v <= x).saturating_sub(1).min(c.len() - 2);
        let w = (x - c[i]) / (c[i + 1] - c[i]);
        cell.push((i, w));
    }

    let (rows, cols) = (grid.nominal_u.len(), d);
    let mut acc = vec![0.0; rows * cols];
    let mut idx = vec![0; d];
    let mut regularized = false;
    for corner in 0..1usize << d {
        let mut weight = 1.0;
        for k in 0..d {
            let upper = (corner >> (d - 1 - k)) & 1 == 1;
            let (i, w) = cell[k];
            idx[k] = i + upper as usize;
            weight *= if upper { w } else { 1.0 - w };
        }
        let flat = grid.flat_index(&idx);
        let m = grid.payload[flat].as_ref().ok_or(Error::MissingCorner(flat))?;
        regularized |= m.regularized;
        for (a, v) in acc.iter_mut().zip(m.as_slice()) {
            *a += weight * v;
        }
    }
    let mut out = SensitivityMatrix::from_row_major(rows, cols, acc)?;
    out.theta_at = theta.to_vec();
    out.regularized = regularized;
    Ok(out)
}

impl JacobianProvider for JacobianGrid {
    fn jacobian(&self, _u: &[f64], theta: &[f64]) -> Result<SensitivityMatrix> {
        interpolate(self, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub nodes_per_dim: usize,
    pub optimizer: OptimizerConfig,
    pub hdsa: HdsaSettings,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            nodes_per_dim: 5,
            optimizer: OptimizerConfig::default(),
            hdsa: HdsaSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub index: usize,
    pub theta: Vec<f64>,
    /// Node whose solution seeded this one (`None` if started from the
    /// nominal controller).
    pub warm_start: Option<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub error: Option<String>,
}

struct NodeSolution {
    u: Vec<f64>,
    d: SensitivityMatrix,
}

/// Solves and differentiates the problem at every grid node.
///
/// Nodes are processed in rings of growing Chebyshev distance from the node
/// nearest `theta = 0`; each ring runs in parallel and every node starts
/// from the first-order prediction of its nearest solved neighbour, so the
/// result does not depend on thread scheduling.
pub fn build_jacobian_grid<O: ParametricObjective + ?Sized>(
    obj: &O,
    nominal_u: &[f64],
    dims: &[usize],
    settings: &GridSettings,
) -> Result<(JacobianGrid, Vec<NodeStatus>)> {
    let m = settings.nodes_per_dim;
    if dims.is_empty() {
        return Err(Error::EmptyImportantSet);
    }
    if m < 2 {
        return Err(Error::InvalidArgument("grid needs at least two nodes per dimension".into()));
    }
    if let Some(&j) = dims.iter().find(|&&j| j >= obj.n_params()) {
        return Err(Error::IndexOutOfRange {
            index: j,
            max: obj.n_params() - 1,
        });
    }
    let coords = uniform_coords(m);
    let mut grid = JacobianGrid {
        dims: dims.to_vec(),
        node_coords: vec![coords.clone(); dims.len()],
        payload: Vec::new(),
        nominal_u: nominal_u.to_vec(),
        meta: GridMeta::default(),
    };
    let n_nodes = grid.n_nodes();
    grid.payload = vec![None; n_nodes];

    let full_theta = |reduced: &[f64]| {
        let mut t = vec![0.0; obj.n_params()];
        for (&j, &v) in dims.iter().zip(reduced) {
            t[j] = v;
        }
        t
    };
    let solve = |u0: &[f64], reduced: &[f64]| -> Result<(NodeSolution, bool, usize, f64)> {
        let theta = full_theta(reduced);
        let rep = optimize(obj, &theta, u0, &settings.optimizer)?;
        let d = hdsa(obj, &rep.x, &theta, dims, &settings.hdsa)?;
        Ok((NodeSolution { u: rep.x, d }, rep.converged, rep.iterations, rep.cost))
    };

    let center_coord = coords
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let center = vec![center_coord; dims.len()];
    let thetas: Vec<Vec<f64>> = (0..n_nodes).map(|i| grid.node_theta(i)).collect();
    let rings: Vec<usize> = (0..n_nodes)
        .map(|flat| {
            grid.node_index(flat)
                .iter()
                .zip(&center)
                .map(|(&i, &c)| i.abs_diff(c))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let n_rings = rings.iter().max().copied().unwrap_or(0) + 1;

    let mut solved: Vec<Option<NodeSolution>> = (0..n_nodes).map(|_| None).collect();
    let mut status: Vec<Option<NodeStatus>> = vec![None; n_nodes];
    let bound = obj.control_bound().min(settings.optimizer.bound);
    for ring in 0..n_rings {
        let members: Vec<usize> = (0..n_nodes).filter(|&i| rings[i] == ring).collect();
        let results: Vec<(usize, Option<usize>, Result<(NodeSolution, bool, usize, f64)>)> = members
            .par_iter()
            .map(|&i| {
                let theta = &thetas[i];
                let seed = (0..n_nodes).filter(|&j| solved[j].is_some()).min_by(|&a, &b| {
                    distance(&thetas[a], theta)
                        .total_cmp(&distance(&thetas[b], theta))
                        .then(a.cmp(&b))
                });
                let u0 = match seed {
                    Some(j) => {
                        let s = solved[j].as_ref().expect("seed is solved");
                        linear_approx(&s.u, &s.d, &thetas[j], theta, bound).unwrap_or_else(|_| s.u.clone())
                    }
                    None => nominal_u.to_vec(),
                };
                let first = solve(&u0, theta);
                if seed.is_none() || matches!(first, Ok((_, true, _, _))) {
                    return (i, seed, first);
                }
                // A long extrapolation can start outside the basin; retry
                // from the nominal controller.
                match solve(nominal_u, theta) {
                    retry @ Ok((_, true, _, _)) => (i, None, retry),
                    retry if first.is_err() => (i, None, retry),
                    _ => (i, seed, first),
                }
            })
            .collect();
        for (i, seed, r) in results {
            let theta = thetas[i].clone();
            status[i] = Some(match r {
                Ok((sol, converged, iterations, cost)) => {
                    log::debug!("grid node {i} solved: converged={converged} iterations={iterations}");
                    let mut d = sol.d.clone();
                    d.theta_at = full_theta(&theta);
                    grid.payload[i] = Some(d);
                    solved[i] = Some(sol);
                    NodeStatus {
                        index: i,
                        theta,
                        warm_start: seed,
                        converged,
                        iterations,
                        cost,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("grid node {i} failed: {e}");
                    NodeStatus {
                        index: i,
                        theta,
                        warm_start: seed,
                        converged: false,
                        iterations: 0,
                        cost: f64::NAN,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    let status = status.into_iter().map(|s| s.expect("every node visited")).collect();
    Ok((grid, status))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidGrid(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::InvalidGrid("unexpected end of grid data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::InvalidGrid("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("digest is 32 bytes")
}

/// Serializes a grid: magic, version, per-dimension parameter index and
/// coordinates, `N`, the nominal controller, metadata, then one flagged
/// payload matrix per node in row-major node order, and finally the first
/// eight bytes of the SHA-256 of everything before it. Little-endian.
pub fn grid_to_bytes(grid: &JacobianGrid) -> Result<Vec<u8>> {
    grid.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(GRID_MAGIC);
    w.0.extend_from_slice(&GRID_FORMAT_VERSION.to_le_bytes());
    w.u32(grid.dims.len())?;
    for (&j, c) in grid.dims.iter().zip(&grid.node_coords) {
        w.u32(j)?;
        w.u32(c.len())?;
        w.f64s(c);
    }
    w.u32(grid.nominal_u.len() - 1)?;
    w.f64s(&grid.nominal_u);
    w.f64s(&[grid.meta.beta0]);
    w.u32(grid.meta.nominal_params.len())?;
    w.f64s(&grid.meta.nominal_params);
    for entry in &grid.payload {
        match entry {
            None => w.0.push(0),
            Some(d) => {
                w.0.push(1 | (d.regularized as u8) << 1);
                w.f64s(&[d.cond_h]);
                w.u32(d.theta_at.len())?;
                w.f64s(&d.theta_at);
                w.f64s(d.as_slice());
            }
        }
    }
    let sum = checksum(&w.0);
    w.0.extend_from_slice(&sum);
    Ok(w.0)
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<JacobianGrid> {
    if bytes.len() < 8 {
        return Err(Error::ChecksumMismatch);
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != sum {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != GRID_MAGIC {
        return Err(Error::InvalidGrid("bad magic bytes".into()));
    }
    let version = r.u32()? as u32;
    if version != GRID_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: GRID_FORMAT_VERSION,
        });
    }
    let n_dims = r.u32()?;
    let mut dims = Vec::new();
    let mut node_coords = Vec::new();
    for _ in 0..n_dims {
        dims.push(r.u32()?);
        let n = r.u32()?;
        node_coords.push(r.f64s(n)?);
    }
    let n_controls = r.u32()? + 1;
    let nominal_u = r.f64s(n_controls)?;
    let beta0 = r.f64s(1)?[0];
    let n_params = r.u32()?;
    let nominal_params = r.f64s(n_params)?;
    let n_nodes: usize = node_coords.iter().map(Vec::len).product();
    let mut payload = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let flag = r.u8()?;
        if flag & 1 == 0 {
            payload.push(None);
            continue;
        }
        let cond_h = r.f64s(1)?[0];
        let n_theta = r.u32()?;
        let theta_at = r.f64s(n_theta)?;
        let mut d = SensitivityMatrix::from_row_major(n_controls, n_dims, r.f64s(n_controls * n_dims)?)?;
        d.cond_h = cond_h;
        d.theta_at = theta_at;
        d.regularized = flag & 2 != 0;
        payload.push(Some(d));
    }
    if r.pos != body.len() {
        return Err(Error::InvalidGrid("trailing bytes after payload".into()));
    }
    let grid = JacobianGrid {
        dims,
        node_coords,
        payload,
        nominal_u,
        meta: GridMeta {
            beta0,
            nominal_params,
        },
    };
    grid.validate()?;
    Ok(grid)
}

pub fn save_grid(grid: &JacobianGrid, path: &Path) -> Result<()> {
    let bytes = grid_to_bytes(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<JacobianGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdsa::toys::Quadratic;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `J = 0.5 (u - sin(theta))^2`: `u*(theta) = sin(theta)`, `D = cos(theta)`.
    struct SinMap;

    impl ParametricObjective for SinMap {
        fn n_controls(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn cost(&self, u: &[f64], theta: &[f64]) -> Result<f64> {
            Ok(0.5 * (u[0] - theta[0].sin()).powi(2))
        }
        fn cost_and_gradient(&self, u: &[f64], theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.cost(u, theta)?, vec![u[0] - theta[0].sin()]))
        }
    }

    fn synthetic_grid(dims: usize, m: usize, rows: usize, f: impl Fn(&[f64], usize) -> f64) -> JacobianGrid {
        let mut g = JacobianGrid {
            dims: (0..dims).collect(),
            node_coords: vec![uniform_coords(m); dims],
            payload: Vec::new(),
            nominal_u: vec![0.1; rows],
            meta: GridMeta {
                beta0: 0.1,
                nominal_params: vec![1.0; dims],
            },
        };
        g.payload = (0..g.n_nodes())
            .map(|i| {
                let th = g.node_theta(i);
                let data = (0..rows * dims).map(|e| f(&th, e)).collect();
                let mut d = SensitivityMatrix::from_row_major(rows, dims, data).unwrap();
                d.theta_at = th;
                Some(d)
            })
            .collect();
        g
    }

    #[test]
    fn zero_step_returns_u_star() {
        let d = SensitivityMatrix::from_row_major(2, 1, vec![3.0, -4.0]).unwrap();
        let u = linear_approx(&[0.2, 0.4], &d, &[0.5], &[0.5], 1.5).unwrap();
        assert_eq!(u, vec![0.2, 0.4]);
    }

    #[test]
    fn linear_approx_clamps() {
        let d = SensitivityMatrix::from_row_major(2, 1, vec![3.0, -4.0]).unwrap();
        let u = linear_approx(&[0.2, 0.4], &d, &[0.0], &[1.0], 1.5).unwrap();
        assert_eq!(u, vec![1.5, -1.5]);
        assert!(linear_approx(&[0.2], &d, &[0.0], &[1.0], 1.5).is_err());
        assert!(linear_approx(&[0.2, 0.1], &d, &[0.0], &[1.0, 2.0], 1.5).is_err());
    }

    #[test]
    fn linear_approx_exact_on_linear_optimum_map() {
        // J = 0.5 |u - a theta|^2 has u* = a theta and D = a everywhere.
        let a = DMatrix::from_row_slice(3, 1, &[0.5, -0.25, 2.0]);
        let toy = Quadratic {
            a: DMatrix::identity(3, 3),
            c: a.clone(),
        };
        let d = hdsa(&toy, &[0.0; 3], &[0.0], &[0], &HdsaSettings::default()).unwrap();
        let u = linear_approx(&[0.0; 3], &d, &[0.0], &[0.7], 10.0).unwrap();
        for i in 0..3 {
            assert!((u[i] - 0.7 * a[(i, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_step_homotopy_is_the_linear_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = synthetic_grid(2, 3, 4, |t, e| (e as f64 + 1.0) * (t[0] * t[1]).cos() + t[0]);
        let cfg = HomotopyConfig {
            steps: 1,
            ..Default::default()
        };
        for _ in 0..50 {
            let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t0: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t1: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = interpolate(&grid, &t0).unwrap();
            let lin = linear_approx(&u, &d, &t0, &t1, cfg.bound).unwrap();
            let hom = homotopy_approx(&u, &t0, &t1, &cfg, &grid).unwrap();
            assert!(lin.iter().zip(&hom).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn homotopy_error_is_first_order() {
        let provider = DirectHdsa {
            objective: &SinMap,
            columns: vec![0],
            base: vec![0.0],
            settings: HdsaSettings::default(),
        };
        let (t0, t1) = (0.0, 1.4);
        let errs: Vec<f64> = [1, 2, 4, 8, 16]
            .iter()
            .map(|&steps| {
                let cfg = HomotopyConfig {
                    steps,
                    source: JacobianSource::Direct,
                    ..Default::default()
                };
                let u = homotopy_approx(&[0.0], &[t0], &[t1], &cfg, &provider).unwrap();
                (u[0] - f64::sin(t1)).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..2.6).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn constant_jacobian_is_step_independent() {
        let grid = synthetic_grid(2, 2, 3, |_, e| 0.1 * e as f64 - 0.2);
        let base = homotopy_approx(&[0.0; 3], &[-0.5, 0.2], &[0.9, -1.0], &HomotopyConfig { steps: 1, ..Default::default() }, &grid).unwrap();
        for steps in [2, 3, 7, 16, 33] {
            let cfg = HomotopyConfig {
                steps,
                ..Default::default()
            };
            let u = homotopy_approx(&[0.0; 3], &[-0.5, 0.2], &[0.9, -1.0], &cfg, &grid).unwrap();
            for (a, b) in u.iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn homotopy_rejects_zero_steps() {
        let grid = synthetic_grid(1, 2, 1, |_, _| 1.0);
        let cfg = HomotopyConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(homotopy_approx(&[0.0], &[0.0], &[1.0], &cfg, &grid).is_err());
    }

    #[test]
    fn endpoint_grid() {
        assert_eq!(uniform_coords(2), vec![-1.0, 1.0]);
        let c = uniform_coords(5);
        assert_eq!(c, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let grid = synthetic_grid(3, 4, 2, |t, e| (t[0] + 2.0 * t[1] * t[2]).exp() * (e as f64 + 1.0));
        for i in 0..grid.n_nodes() {
            let d = interpolate(&grid, &grid.node_theta(i)).unwrap();
            let want = grid.payload[i].as_ref().unwrap();
            for (a, b) in d.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn interpolation_exact_for_linear_payload() {
        let lin = |t: &[f64], e: usize| 0.3 + e as f64 * t[0] - 1.7 * t[1] + 0.25 * t[2];
        let grid = synthetic_grid(3, 3, 2, lin);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let th: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let d = interpolate(&grid, &th).unwrap();
            for (e, v) in d.as_slice().iter().enumerate() {
                assert!((v - lin(&th, e)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolant_within_corner_range() {
        let grid = synthetic_grid(2, 3, 1, |t, _| (5.0 * t[0]).sin() * t[1]);
        let max = grid.payload.iter().flatten().map(|d| d.get(0, 0).abs()).fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let th = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            let d = interpolate(&grid, &th).unwrap();
            assert!(d.get(0, 0).abs() <= max + 1e-15);
        }
    }

    #[test]
    fn interpolation_errors() {
        let mut grid = synthetic_grid(2, 3, 1, |_, _| 1.0);
        assert!(matches!(interpolate(&grid, &[1.5, 0.0]), Err(Error::OutOfGridBounds(_))));
        assert!(matches!(interpolate(&grid, &[0.0]), Err(Error::ShapeMismatch(_))));
        grid.payload[0] = None;
        assert!(matches!(interpolate(&grid, &[-0.5, -0.5]), Err(Error::MissingCorner(0))));
        assert!(interpolate(&grid, &[0.5, 0.5]).is_ok());
    }

    #[test]
    fn node_ordering_is_row_major() {
        let grid = synthetic_grid(2, 3, 1, |_, _| 0.0);
        assert_eq!(grid.node_theta(0), vec![-1.0, -1.0]);
        assert_eq!(grid.node_theta(1), vec![-1.0, 0.0]);
        assert_eq!(grid.node_theta(3), vec![0.0, -1.0]);
        assert_eq!(grid.flat_index(&[2, 1]), 7);
        assert_eq!(grid.node_index(7), vec![2, 1]);
    }

    fn toy_objective() -> Quadratic {
        Quadratic {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            c: DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -0.5, 0.3, 2.0, 0.1]),
        }
    }

    #[test]
    fn grid_build_on_quadratic_toy() {
        let toy = toy_objective();
        let settings = GridSettings {
            nodes_per_dim: 3,
            ..Default::default()
        };
        let (grid, status) = build_jacobian_grid(&toy, &[0.0, 0.0], &[0, 2], &settings).unwrap();
        assert_eq!(grid.n_nodes(), 9);
        assert!(grid.missing_nodes().is_empty());
        assert!(status.iter().all(|s| s.converged && s.error.is_none()));
        assert_eq!(status[4].warm_start, None);
        // D = A^{-1} C restricted to the grid columns, at every node.
        let d_true = toy.a.clone().try_inverse().unwrap() * &toy.c;
        let center = hdsa(&toy, &[0.0, 0.0], &[0.0; 3], &[0, 2], &HdsaSettings::default()).unwrap();
        for d in grid.payload.iter().flatten() {
            for i in 0..2 {
                assert!((d.get(i, 0) - d_true[(i, 0)]).abs() < 1e-8);
                assert!((d.get(i, 1) - d_true[(i, 2)]).abs() < 1e-8);
            }
        }
        let stored = grid.payload[4].as_ref().unwrap();
        for (a, b) in stored.as_slice().iter().zip(center.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_build_rejects_bad_input() {
        let toy = toy_objective();
        let s = GridSettings::default();
        assert!(matches!(build_jacobian_grid(&toy, &[0.0; 2], &[], &s), Err(Error::EmptyImportantSet)));
        assert!(build_jacobian_grid(&toy, &[0.0; 2], &[5], &s).is_err());
        let one = GridSettings {
            nodes_per_dim: 1,
            ..Default::default()
        };
        assert!(build_jacobian_grid(&toy, &[0.0; 2], &[0], &one).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let mut grid = synthetic_grid(3, 3, 4, |t, e| t[0] * e as f64 + t[2]);
        grid.payload[5] = None;
        if let Some(d) = grid.payload[7].as_mut() {
            d.regularized = true;
            d.cond_h = 3.5e12;
        }
        let bytes = grid_to_bytes(&grid).unwrap();
        assert_eq!(&bytes[..4], GRID_MAGIC);
        assert_eq!(grid_from_bytes(&bytes).unwrap(), grid);
    }

    #[test]
    fn corruption_rejected() {
        let grid = synthetic_grid(2, 2, 2, |t, _| t[0]);
        let bytes = grid_to_bytes(&grid).unwrap();
        assert!(matches!(grid_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::ChecksumMismatch)));
        assert!(matches!(grid_from_bytes(&bytes[..5]), Err(Error::ChecksumMismatch)));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(grid_from_bytes(&flipped), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn version_mismatch_detected() {
        let grid = synthetic_grid(1, 2, 1, |t, _| t[0]);
        let mut bytes = grid_to_bytes(&grid).unwrap();
        bytes.truncate(bytes.len() - 8);
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let sum = checksum(&bytes);
        bytes.extend_from_slice(&sum);
        assert!(matches!(
            grid_from_bytes(&bytes),
            Err(Error::FormatVersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn empty_dims_rejected_at_save() {
        let mut grid = synthetic_grid(1, 2, 1, |t, _| t[0]);
        grid.dims.clear();
        grid.node_coords.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(save_grid(&grid, &dir.path().join("g.bin")), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let grid = synthetic_grid(2, 3, 2, |t, e| t[1] - e as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.rjgd");
        save_grid(&grid, &path).unwrap();
        assert_eq!(load_grid(&path).unwrap(), grid);
        assert!(matches!(load_grid(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}

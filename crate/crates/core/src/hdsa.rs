//! Hyper-differential sensitivity analysis.
//!
//! At an optimum `grad_u J(u*, theta) = 0`; differentiating in `theta` gives
//! `H D + B = 0`, so the sensitivity of the optimal controller is
//! `D = -H^{-1} B` with `H = d2J/du2` and `B = d2J/du dtheta`. Both are
//! central differences of the exact (sensitivity-equation) gradient.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::ParametricObjective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdsaSettings {
    /// Central-difference step in the controller coefficients (rad).
    pub step_u: f64,
    /// Central-difference step in theta.
    pub step_theta: f64,
    /// Condition-number ceiling above which the Hessian is regularized.
    pub cond_ceiling: f64,
}

impl Default for HdsaSettings {
    fn default() -> Self {
        HdsaSettings {
            step_u: 1e-5,
            step_theta: 1e-4,
            cond_ceiling: 1e12,
        }
    }
}

/// `D = du*/dtheta`, `(N+1) x P`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Theta at which the matrix was computed (full parameter vector).
    pub theta_at: Vec<f64>,
    /// Condition estimate of the Hessian used in the solve (0 if unknown).
    pub cond_h: f64,
    /// Whether the Tikhonov fallback was applied.
    pub regularized: bool,
}

impl SensitivityMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEntry("sensitivity matrix"));
        }
        Ok(SensitivityMatrix {
            rows,
            cols,
            data,
            theta_at: Vec::new(),
            cond_h: 0.0,
            regularized: false,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SensitivityMatrix::from_row_major(rows, cols, vec![0.0; rows * cols]).unwrap()
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = m.shape();
        let data = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        SensitivityMatrix::from_row_major(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Keeps only the listed columns, in order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.cols) {
            return Err(Error::IndexOutOfRange {
                index: c,
                max: self.cols.saturating_sub(1),
            });
        }
        let data = (0..self.rows)
            .flat_map(|i| columns.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect();
        Ok(SensitivityMatrix {
            rows: self.rows,
            cols: columns.len(),
            data,
            theta_at: self.theta_at.clone(),
            cond_h: self.cond_h,
            regularized: self.regularized,
        })
    }

    /// `D * dtheta`.
    pub fn apply(&self, dtheta: &[f64]) -> Result<Vec<f64>> {
        if dtheta.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "step has {} entries, matrix has {} columns",
                dtheta.len(),
                self.cols
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(dtheta).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn gradient<O: ParametricObjective + ?Sized>(obj: &O, u: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    Ok(obj.cost_and_gradient(u, theta)?.1)
}

/// Central-difference Hessian columns before symmetrization.
pub fn hessian_unsymmetrized<O: ParametricObjective + ?Sized>(
    obj: &O,
    u: &[f64],
    theta: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = u.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[j] += step;
            dn[j] -= step;
            let gp = gradient(obj, &up, theta)?;
            let gm = gradient(obj, &dn, theta)?;
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        })
        .collect::<Result<_>>()?;
    let h = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry("Hessian"));
    }
    Ok(h)
}

/// `H = d2J/du2`, symmetrized as `(H + H^T) / 2`.
pub fn hessian<O: ParametricObjective + ?Sized>(
    obj: &O,
    u: &[f64],
    theta: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let h = hessian_unsymmetrized(obj, u, theta, step)?;
    Ok((&h + h.transpose()) * 0.5)
}

/// `B = d2J/du dtheta_j` for the listed parameter columns.
pub fn mixed_partials<O: ParametricObjective + ?Sized>(
    obj: &O,
    u: &[f64],
    theta: &[f64],
    columns: &[usize],
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = u.len();
    let cols: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|&j| {
            if j >= theta.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    max: theta.len().saturating_sub(1),
                });
            }
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[j] += step;
            dn[j] -= step;
            let gp = gradient(obj, u, &up)?;
            let gm = gradient(obj, u, &dn)?;
            Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        })
        .collect::<Result<_>>()?;
    let b = DMatrix::from_fn(n, columns.len(), |i, j| cols[j][i]);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry("mixed partials"));
    }
    Ok(b)
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_estimate(h: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(h.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `H D = -B`. Fails with `SingularHessian` when the condition
/// estimate exceeds `cond_ceiling`.
pub fn sensitivity_matrix(h: &DMatrix<f64>, b: &DMatrix<f64>, cond_ceiling: f64) -> Result<SensitivityMatrix> {
    if h.nrows() != h.ncols() || h.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "H is {:?}, B is {:?}",
            h.shape(),
            b.shape()
        )));
    }
    let cond = condition_estimate(h);
    if !(cond <= cond_ceiling) {
        return Err(Error::SingularHessian { cond });
    }
    let mut out = solve(h, b)?;
    out.cond_h = cond;
    Ok(out)
}

/// As [`sensitivity_matrix`], falling back to `H + lambda I` with
/// `lambda = 1e-8 trace(H) / n` when the Hessian is too ill-conditioned.
pub fn sensitivity_matrix_regularized(
    h: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cond_ceiling: f64,
) -> Result<SensitivityMatrix> {
    match sensitivity_matrix(h, b, cond_ceiling) {
        Err(Error::SingularHessian { .. }) => {
            let n = h.nrows();
            let lambda = 1e-8 * h.trace().abs() / n as f64;
            let reg = h + DMatrix::identity(n, n) * lambda;
            let mut out = solve(&reg, b)?;
            out.cond_h = condition_estimate(&reg);
            out.regularized = true;
            Ok(out)
        }
        other => other,
    }
}

fn solve(h: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SensitivityMatrix> {
    let rhs = -b;
    let d = match h.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => h
            .clone()
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularHessian { cond: f64::INFINITY })?,
    };
    SensitivityMatrix::from_matrix(&d)
}

/// Full HDSA at `(u, theta)` for the listed parameter columns.
pub fn hdsa<O: ParametricObjective + ?Sized>(
    obj: &O,
    u: &[f64],
    theta: &[f64],
    columns: &[usize],
    settings: &HdsaSettings,
) -> Result<SensitivityMatrix> {
    let h = hessian(obj, u, theta, settings.step_u)?;
    let b = mixed_partials(obj, u, theta, columns, settings.step_theta)?;
    let mut d = sensitivity_matrix_regularized(&h, &b, settings.cond_ceiling)?;
    d.theta_at = theta.to_vec();
    Ok(d)
}


#[cfg(test)]
mod tests {
    use super::toys::Quadratic;
    use super::*;

    fn shifted_bowl(a: Vec<f64>, p: usize) -> Quadratic {
        // J = 0.5 |u - a theta_1|^2
        let n = a.len();
        let mut c = DMatrix::zeros(n, p);
        for (i, v) in a.iter().enumerate() {
            c[(i, 0)] = *v;
        }
        Quadratic {
            a: DMatrix::identity(n, n),
            c,
        }
    }

    #[test]
    fn quadratic_hessian_is_exact() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let toy = Quadratic {
            a: a.clone(),
            c: DMatrix::zeros(3, 1),
        };
        let h = hessian(&toy, &[0.1, 0.2, 0.3], &[0.0], 1e-5).unwrap();
        assert!((&h - &a).norm() <= 1e-6 * a.norm());
    }

    #[test]
    fn bilinear_toy_mixed_partials_and_sensitivity() {
        let a = vec![0.5, -1.0, 2.0, 0.25];
        let toy = shifted_bowl(a.clone(), 3);
        let u = a.iter().map(|v| v * 0.3).collect::<Vec<_>>();
        let theta = [0.3, 0.0, 0.0];
        let b = mixed_partials(&toy, &u, &theta, &[0, 1, 2], 1e-4).unwrap();
        for i in 0..4 {
            assert!((b[(i, 0)] + a[i]).abs() < 1e-8);
            assert!(b[(i, 1)].abs() < 1e-8 && b[(i, 2)].abs() < 1e-8);
        }
        let d = hdsa(&toy, &u, &theta, &[0, 1, 2], &HdsaSettings::default()).unwrap();
        for i in 0..4 {
            assert!((d.get(i, 0) - a[i]).abs() < 1e-10);
        }
        assert!(!d.regularized);
    }

    #[test]
    fn theta_independent_cost_has_zero_mixed_partials() {
        let toy = Quadratic {
            a: DMatrix::identity(2, 2),
            c: DMatrix::zeros(2, 2),
        };
        let b = mixed_partials(&toy, &[0.3, 0.4], &[0.1, -0.2], &[0, 1], 1e-4).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn solve_residual_is_small() {
        let h = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.0, 1.0, 4.0, -1.0, 0.0, -1.0, 3.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -2.0, 1.0, 0.5, 3.0]);
        let d = sensitivity_matrix(&h, &b, 1e12).unwrap().to_matrix();
        let res = (&h * &d + &b).norm() / b.norm();
        assert!(res < 1e-8);
    }

    #[test]
    fn singular_hessian_detected_and_regularized() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            sensitivity_matrix(&h, &b, 1e12),
            Err(Error::SingularHessian { .. })
        ));
        let d = sensitivity_matrix_regularized(&h, &b, 1e12).unwrap();
        assert!(d.regularized);
        assert!((d.get(0, 0) + 1.0 / (1.0 + 5e-9)).abs() < 1e-12);
    }

    #[test]
    fn column_selection_and_apply() {
        let d = SensitivityMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = d.select_columns(&[2, 0]).unwrap();
        assert_eq!(s.as_slice(), &[3.0, 1.0, 6.0, 4.0]);
        assert_eq!(d.apply(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert!(d.apply(&[1.0]).is_err());
        assert!(d.select_columns(&[3]).is_err());
    }
}

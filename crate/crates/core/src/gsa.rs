//! Global sensitivity screening: Sobol low-discrepancy points, derivative-based
//! global sensitivity measures (DGSMs) and the Poincare-type upper bound on
//! total Sobol indices for i.i.d. uniform inputs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdsa::SensitivityMatrix;

const BITS: u32 = 32;

/// Primitive-polynomial data `(degree, coefficients, initial m_k)` for
/// dimensions 2 onward (Joe & Kuo, new-joe-kuo-6.21201).
const DIRECTIONS: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
];

pub const MAX_DIMENSION: usize = DIRECTIONS.len() + 1;

/// Unscrambled Sobol sequence in Gray-code order; the first point is the
/// origin of `[0,1)^d`.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS as usize]>,
    state: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("Sobol dimension must be positive".into()));
        }
        if dim > MAX_DIMENSION {
            return Err(Error::DimensionTooLarge(dim));
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; BITS as usize];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1 << (BITS - 1 - k as u32);
        }
        directions.push(first);
        for &(s, a, m) in &DIRECTIONS[..dim - 1] {
            let s = s as usize;
            let mut v = [0u32; BITS as usize];
            for k in 0..BITS as usize {
                v[k] = if k < s {
                    m[k] << (BITS - 1 - k as u32)
                } else {
                    let mut x = v[k - s] ^ (v[k - s] >> s);
                    for i in 1..s {
                        if (a >> (s - 1 - i)) & 1 == 1 {
                            x ^= v[k - i];
                        }
                    }
                    x
                };
            }
            directions.push(v);
        }
        Ok(Sobol {
            directions,
            state: vec![0; dim],
            index: 0,
        })
    }

    /// Next point in `[0,1)^d`.
    pub fn next_point(&mut self) -> Vec<f64> {
        let scale = 1.0 / (1u64 << BITS) as f64;
        let out = self.state.iter().map(|&s| s as f64 * scale).collect();
        let c = (!self.index).trailing_zeros() as usize;
        for (s, v) in self.state.iter_mut().zip(&self.directions) {
            *s ^= v[c.min(BITS as usize - 1)];
        }
        self.index += 1;
        out
    }
}

/// `count` Sobol points mapped affinely onto `[-1,1]^dim`.
pub fn qmc_samples(dim: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut seq = Sobol::new(dim)?;
    Ok((0..count)
        .map(|_| seq.next_point().into_iter().map(|x| 2.0 * x - 1.0).collect())
        .collect())
}

/// `N_j ~ (1/M) sum_k sum_i (D_ij at sample k)^2`.
pub fn dgsm_estimate(samples: &[SensitivityMatrix]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("DGSM needs at least one sample".into()))?;
    let (rows, cols) = first.shape();
    let mut acc = vec![0.0; cols];
    for d in samples {
        if d.shape() != (rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "sample is {:?}, expected {:?}",
                d.shape(),
                (rows, cols)
            )));
        }
        for row in d.as_slice().chunks_exact(cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v * v;
            }
        }
    }
    let m = samples.len() as f64;
    Ok(acc.into_iter().map(|a| a / m).collect())
}

/// The constant `(b - a)^2 / pi^2` for i.i.d. `U(a, b)` inputs.
pub fn poincare_constant(a: f64, b: f64) -> f64 {
    (b - a).powi(2) / (PI * PI)
}

/// Upper bounds `c N_j / Tr(Gamma)` on the total Sobol indices.
pub fn sobol_upper_bound(dgsm: &[f64], trace_gamma: f64, a: f64, b: f64) -> Result<Vec<f64>> {
    if !(trace_gamma > 0.0) {
        return Err(Error::NonPositiveTrace(trace_gamma));
    }
    if !(b > a) {
        return Err(Error::InvalidArgument(format!("need a < b, got [{a}, {b}]")));
    }
    let c = poincare_constant(a, b);
    Ok(dgsm.iter().map(|n| c * n / trace_gamma).collect())
}

/// Sum over coefficients of the unbiased sample variance.
pub fn trace_covariance(u_samples: &[Vec<f64>]) -> Result<f64> {
    let m = u_samples.len();
    if m < 2 {
        return Err(Error::InvalidArgument("covariance needs at least two samples".into()));
    }
    let n = u_samples[0].len();
    if u_samples.iter().any(|u| u.len() != n) {
        return Err(Error::ShapeMismatch("controller samples differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mean = u_samples.iter().map(|u| u[i]).sum::<f64>() / m as f64;
        total += u_samples.iter().map(|u| (u[i] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub names: Vec<String>,
    pub dgsm: Vec<f64>,
    pub bounds: Vec<f64>,
    pub trace_gamma: f64,
    pub threshold: f64,
    /// Indices with bound above the threshold, ascending.
    pub important: Vec<usize>,
    /// All indices by descending bound.
    pub ranking: Vec<usize>,
    pub samples_used: usize,
    pub samples_failed: usize,
}

impl ScreeningReport {
    pub fn important_names(&self) -> Vec<&str> {
        self.important.iter().map(|&i| self.names[i].as_str()).collect()
    }
}

/// Builds the screening report for parameters on `U(a, b)`.
pub fn screen(
    names: Vec<String>,
    dgsm: Vec<f64>,
    trace_gamma: f64,
    threshold: f64,
    (a, b): (f64, f64),
) -> Result<ScreeningReport> {
    if names.len() != dgsm.len() {
        return Err(Error::ShapeMismatch("parameter names and DGSMs disagree".into()));
    }
    let bounds = sobol_upper_bound(&dgsm, trace_gamma, a, b)?;
    let important = (0..bounds.len()).filter(|&j| bounds[j] > threshold).collect();
    let mut ranking: Vec<usize> = (0..bounds.len()).collect();
    ranking.sort_by(|&i, &j| bounds[j].total_cmp(&bounds[i]).then(i.cmp(&j)));
    Ok(ScreeningReport {
        names,
        dgsm,
        bounds,
        trace_gamma,
        threshold,
        important,
        ranking,
        samples_used: 0,
        samples_failed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_reference_points() {
        // Reference values from an independent Joe-Kuo implementation, in
        // units of 2^-10.
        let expected: [(usize, [u32; 21]); 4] = [
            (13, [832, 704, 832, 64, 448, 960, 576, 576, 576, 448, 832, 960, 64, 832, 192, 576, 192, 704, 576, 960, 576]),
            (100, [424, 264, 792, 744, 904, 760, 24, 488, 648, 712, 472, 696, 488, 872, 328, 504, 696, 760, 856, 344, 776]),
            (777, [709, 959, 167, 281, 651, 365, 195, 781, 357, 331, 763, 713, 393, 485, 583, 527, 413, 885, 379, 771, 243]),
            (1023, [1, 771, 627, 149, 191, 449, 143, 633, 353, 871, 695, 37, 133, 681, 371, 475, 321, 897, 599, 327, 887]),
        ];
        let tail: [[u32; 4]; 4] = [[64, 832, 576, 64], [408, 8, 504, 24], [279, 969, 493, 353], [19, 813, 201, 245]];
        let mut seq = Sobol::new(MAX_DIMENSION).unwrap();
        let pts: Vec<Vec<f64>> = (0..1024).map(|_| seq.next_point()).collect();
        for ((i, row), extra) in expected.into_iter().zip(tail) {
            let got: Vec<u32> = pts[i].iter().map(|x| (x * 1024.0) as u32).collect();
            assert_eq!(&got[..21], &row[..], "point {i}");
            assert_eq!(&got[21..], &extra[..], "point {i}");
        }
    }

    #[test]
    fn first_point_is_origin() {
        let pts = qmc_samples(7, 1).unwrap();
        assert_eq!(pts, vec![vec![-1.0; 7]]);
    }

    #[test]
    fn deterministic_and_centered() {
        let a = qmc_samples(7, 1024).unwrap();
        assert_eq!(a, qmc_samples(7, 1024).unwrap());
        for j in 0..7 {
            let mean = a.iter().map(|p| p[j]).sum::<f64>() / 1024.0;
            assert!(mean.abs() < 0.02);
        }
    }

    #[test]
    fn half_intervals_are_balanced() {
        let pts = qmc_samples(21, 256).unwrap();
        for j in 0..21 {
            let below = pts.iter().filter(|p| p[j] < 0.0).count();
            assert!((127..=129).contains(&below), "dim {j}: {below}");
        }
    }

    #[test]
    fn dimension_limit() {
        assert!(Sobol::new(MAX_DIMENSION).is_ok());
        assert!(matches!(qmc_samples(MAX_DIMENSION + 1, 4), Err(Error::DimensionTooLarge(_))));
    }

    #[test]
    fn dgsm_direct_formula() {
        let zero = SensitivityMatrix::zeros(5, 3);
        assert_eq!(dgsm_estimate(&[zero.clone(), zero]).unwrap(), vec![0.0; 3]);

        let mut data = vec![0.0; 5 * 3];
        for i in 0..5 {
            data[i * 3 + 1] = 1.0;
        }
        let d = SensitivityMatrix::from_row_major(5, 3, data).unwrap();
        assert_eq!(dgsm_estimate(&[d]).unwrap(), vec![0.0, 5.0, 0.0]);

        let bad = SensitivityMatrix::zeros(4, 3);
        assert!(dgsm_estimate(&[SensitivityMatrix::zeros(5, 3), bad]).is_err());
    }

    #[test]
    fn dgsm_of_linear_model_is_sample_independent() {
        let c = [0.3, -1.2, 0.7, 0.05];
        let mut data = vec![0.0; 4 * 2];
        for i in 0..4 {
            data[i * 2] = c[i];
        }
        let d = SensitivityMatrix::from_row_major(4, 2, data).unwrap();
        let expected: f64 = c.iter().map(|v| v * v).sum();
        for m in [1, 3, 17] {
            let n = dgsm_estimate(&vec![d.clone(); m]).unwrap();
            assert!((n[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn bound_constant_and_ratio() {
        assert!((poincare_constant(-1.0, 1.0) - 0.405285).abs() < 1e-6);
        let dgsm = [3.22e-3, 3.56e-3, 9.91e-3, 2.66, 6.56e-1, 5.39e-3, 7.5e-1];
        let bounds = sobol_upper_bound(&dgsm, 0.0613, -1.0, 1.0).unwrap();
        let r0 = bounds[0] / dgsm[0];
        for (b, n) in bounds.iter().zip(&dgsm) {
            assert!(((b / n) - r0).abs() <= 1e-12 * r0);
        }
        assert!(matches!(
            sobol_upper_bound(&dgsm, 0.0, -1.0, 1.0),
            Err(Error::NonPositiveTrace(_))
        ));
    }

    #[test]
    fn published_bound_ratio_is_consistent() {
        // Bound / DGSM pairs for m, b0 and b2 share one constant.
        let ratios: [f64; 3] = [2.13e-2 / 3.22e-3, 4.33 / 0.656, 4.95 / 0.750];
        for r in ratios {
            assert!((r - 6.61).abs() < 0.03, "{r}");
        }
    }

    #[test]
    fn trace_covariance_examples() {
        let same = vec![vec![0.3, 0.1]; 5];
        assert_eq!(trace_covariance(&same).unwrap(), 0.0);
        let c = 0.7;
        let pair = vec![vec![c, 0.0], vec![-c, 0.0]];
        assert!((trace_covariance(&pair).unwrap() - 2.0 * c * c).abs() < 1e-15);
        assert!(trace_covariance(&same[..1]).is_err());
    }

    #[test]
    fn trace_covariance_of_additive_model() {
        let c = [0.8, -0.3, 0.5];
        let pts = qmc_samples(3, 512).unwrap();
        let u: Vec<Vec<f64>> = pts
            .iter()
            .map(|t| vec![c.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), 0.0])
            .collect();
        let expected = c.iter().map(|v| v * v).sum::<f64>() / 3.0;
        let got = trace_covariance(&u).unwrap();
        assert!((got - expected).abs() < 0.05 * expected);
    }

    #[test]
    fn bound_dominates_exact_indices_of_additive_models() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = rng.gen_range(2..=7);
            let c: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let total: f64 = c.iter().map(|v| v * v).sum();
            // D is constant, so N_j = c_j^2; the exact variance is sum c^2 / 3.
            let dgsm: Vec<f64> = c.iter().map(|v| v * v).collect();
            let bounds = sobol_upper_bound(&dgsm, total / 3.0, -1.0, 1.0).unwrap();
            for (j, b) in bounds.iter().enumerate() {
                assert!(*b >= c[j] * c[j] / total);
            }
        }
    }

    #[test]
    fn screening_thresholds() {
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let r = screen(names.clone(), vec![1.0, 0.01, 3.0], 1.0, 0.1, (-1.0, 1.0)).unwrap();
        assert_eq!(r.important, vec![0, 2]);
        assert_eq!(r.ranking, vec![2, 0, 1]);
        let all = screen(names.clone(), vec![1.0, 0.01, 3.0], 1.0, 0.0, (-1.0, 1.0)).unwrap();
        assert_eq!(all.important, vec![0, 1, 2]);
        let none = screen(names, vec![1.0, 0.01, 3.0], 1.0, f64::INFINITY, (-1.0, 1.0)).unwrap();
        assert!(none.important.is_empty());
    }
}

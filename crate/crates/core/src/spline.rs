//! Polynomial B-spline bases on `[0, 1]`.
//!
//! Bases are evaluated with the Cox-de Boor recursion on a clamped knot
//! vector (boundary knots repeated `degree + 1` times). Blocks of basis rows
//! are centered column-wise so that each fitted component has mean zero over
//! the rows used to build the centering means.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("spline degree must be at least 1, got {0}")]
    InvalidDegree(usize),
    #[error("quantile knot placement needs at least {needed} distinct values, got {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("x = {0} is outside [0, 1]")]
    OutOfDomain(f64),
    #[error("expected {expected} values, got {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotPlacement {
    #[default]
    Uniform,
    Quantile,
}

/// Degree, interior knot count and placement rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub degree: usize,
    pub interior_knots: usize,
    pub placement: KnotPlacement,
}

impl Default for SplineConfig {
    /// Cubic with no interior knots: four basis functions.
    fn default() -> Self {
        Self {
            degree: 3,
            interior_knots: 0,
            placement: KnotPlacement::Uniform,
        }
    }
}

impl SplineConfig {
    pub fn basis_size(&self) -> usize {
        self.interior_knots + self.degree + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    degree: usize,
    interior: Vec<f64>,
    knots: Vec<f64>,
}

impl SplineSpec {
    /// Builds a clamped knot vector from explicit interior knots.
    pub fn with_interior(degree: usize, interior: Vec<f64>) -> Result<Self, SplineError> {
        if degree == 0 {
            return Err(SplineError::InvalidDegree(degree));
        }
        let mut knots = vec![0.0; degree + 1];
        knots.extend(interior.iter().copied());
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self {
            degree,
            interior,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `interior + degree + 1`.
    pub fn basis_size(&self) -> usize {
        self.interior.len() + self.degree + 1
    }

    /// Support `[knots[l], knots[l + degree + 1]]` of basis function `l`.
    pub fn support(&self, l: usize) -> (f64, f64) {
        (self.knots[l], self.knots[l + self.degree + 1])
    }

    /// Basis values at `x`. Right-continuous at interior knots; at `x = 1`
    /// the last function equals one.
    pub fn eval(&self, x: f64) -> Result<Array1<f64>, SplineError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(SplineError::OutOfDomain(x));
        }
        let mut out = Array1::zeros(self.basis_size());
        self.eval_into(x, out.as_slice_mut().expect("contiguous"));
        Ok(out)
    }

    /// Evaluates into `out` (length `basis_size`). `x` must lie in `[0, 1]`.
    pub(crate) fn eval_into(&self, x: f64, out: &mut [f64]) {
        let d = self.degree;
        let t = &self.knots;
        let n_basis = self.basis_size();
        // span k with t[k] <= x < t[k+1], restricted to d..=n_basis-1
        let k = if x >= t[n_basis] {
            n_basis - 1
        } else {
            let mut k = d;
            while k + 1 < n_basis && t[k + 1] <= x {
                k += 1;
            }
            k
        };
        // Cox-de Boor triangular scheme for the d+1 nonzero functions
        let mut local = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        local[0] = 1.0;
        for r in 1..=d {
            left[r] = x - t[k + 1 - r];
            right[r] = t[k + r] - x;
            let mut saved = 0.0;
            for s in 0..r {
                let denom = right[s + 1] + left[r - s];
                let temp = if denom > 0.0 { local[s] / denom } else { 0.0 };
                local[s] = saved + right[s + 1] * temp;
                saved = left[r - s] * temp;
            }
            local[r] = saved;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (s, v) in local.into_iter().enumerate() {
            out[k - d + s] = v;
        }
    }

    /// Basis rows for a batch of points in `[0, 1]`.
    pub fn eval_many(&self, xs: &[f64]) -> Result<Array2<f64>, SplineError> {
        let mut out = Array2::zeros((xs.len(), self.basis_size()));
        for (mut row, &x) in out.rows_mut().into_iter().zip(xs) {
            if !(0.0..=1.0).contains(&x) {
                return Err(SplineError::OutOfDomain(x));
            }
            self.eval_into(x, row.as_slice_mut().expect("contiguous"));
        }
        Ok(out)
    }
}

/// Builds a knot vector for `config`. Quantile placement puts interior knots
/// at the `k / (J + 1)` empirical quantiles of `data` (values in `[0, 1]`).
pub fn make_spec(config: &SplineConfig, data: Option<&[f64]>) -> Result<SplineSpec, SplineError> {
    if config.degree == 0 {
        return Err(SplineError::InvalidDegree(0));
    }
    let j = config.interior_knots;
    let interior = match config.placement {
        KnotPlacement::Uniform => (1..=j).map(|k| k as f64 / (j + 1) as f64).collect(),
        KnotPlacement::Quantile => {
            let mut sorted: Vec<f64> = data.unwrap_or(&[]).to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let needed = j + 2;
            if sorted.len() < needed {
                return Err(SplineError::InsufficientData {
                    needed,
                    found: sorted.len(),
                });
            }
            let knots: Vec<f64> = (1..=j)
                .map(|k| quantile(&sorted, k as f64 / (j + 1) as f64))
                .collect();
            let strictly_inside = knots.iter().all(|&u| u > 0.0 && u < 1.0)
                && knots.windows(2).all(|w| w[0] < w[1]);
            if !strictly_inside {
                return Err(SplineError::InsufficientData {
                    needed,
                    found: sorted.len(),
                });
            }
            knots
        }
    };
    SplineSpec::with_interior(config.degree, interior)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Basis evaluations for one covariate, optionally centered.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBlock {
    values: Array2<f64>,
    column_means: Array1<f64>,
    centered: bool,
}

impl BasisBlock {
    pub fn new(values: Array2<f64>) -> Self {
        let l = values.ncols();
        Self {
            values,
            column_means: Array1::zeros(l),
            centered: false,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column_means(&self) -> &Array1<f64> {
        &self.column_means
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Subtracts column means (computed from the block, or the supplied training
/// means) and records them. Centering an already-centered block is a no-op.
pub fn center_block(block: BasisBlock, means: Option<&Array1<f64>>) -> Result<BasisBlock, SplineError> {
    let l = block.values.ncols();
    if let Some(m) = means {
        if m.len() != l {
            return Err(SplineError::LengthMismatch {
                expected: l,
                found: m.len(),
            });
        }
    }
    if block.centered {
        return Ok(block);
    }
    let means = match means {
        Some(m) => m.clone(),
        None => column_means(&block.values),
    };
    let mut values = block.values;
    for mut row in values.rows_mut() {
        row -= &means;
    }
    Ok(BasisBlock {
        values,
        column_means: means,
        centered: true,
    })
}

pub(crate) fn column_means(values: &Array2<f64>) -> Array1<f64> {
    if values.nrows() == 0 {
        return Array1::zeros(values.ncols());
    }
    values.sum_axis(ndarray::Axis(0)) / values.nrows() as f64
}

//! PRIME-MA: jackknife model averaging over single-nonlinear candidates.
//!
//! Candidate `j` models covariate `j` with a spline and every other
//! covariate linearly. Weights minimize the squared leave-one-out
//! prediction error of the weighted candidate mix on the complete cases,
//! over the probability simplex. Final predictions average the full-data
//! candidate fits.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{complete_case_subset, ModelStructure, NormalizationMap, ObservationTable};
use crate::fit::{fit_prime, FitError, FitOptions, PrimeFit};
use crate::linalg::PivotedQr;
use crate::spline::{make_spec, SplineConfig};

/// Units whose leverage reaches `1 - LEVERAGE_MARGIN` have no usable
/// leave-one-out residual.
pub const LEVERAGE_MARGIN: f64 = 1e-8;
pub const QP_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum AveragingError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("model averaging needs at least 2 covariates, got {0}")]
    TooFewColumns(usize),
    #[error("only {n0} complete cases for a {cols}-column candidate design")]
    InsufficientCompleteCases { n0: usize, cols: usize },
    #[error("design has rank zero")]
    SingularGram,
    #[error("unit {unit} has leverage {leverage} (numerically one)")]
    LeverageOne { unit: usize, leverage: f64 },
    #[error("{fits} candidate fits but {weights} weights")]
    LengthMismatch { fits: usize, weights: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    /// The single nonlinear covariate.
    pub column: usize,
    pub structure: ModelStructure,
}

/// One candidate per covariate, in column order.
pub fn build_candidates(n_cols: usize) -> Result<Vec<CandidateModel>, AveragingError> {
    if n_cols < 2 {
        return Err(AveragingError::TooFewColumns(n_cols));
    }
    (0..n_cols)
        .map(|column| {
            let linear = (0..n_cols).filter(|&c| c != column).collect();
            Ok(CandidateModel {
                column,
                structure: ModelStructure::new(vec![column], linear, n_cols)
                    .map_err(FitError::from)?,
            })
        })
        .collect()
}

/// Full-data PRIME fit under the candidate's structure.
pub fn fit_candidate_full(
    table: &ObservationTable,
    candidate: &CandidateModel,
    options: &FitOptions,
) -> Result<PrimeFit, AveragingError> {
    let t = table
        .with_structure(candidate.structure.clone())
        .map_err(FitError::from)?;
    Ok(fit_prime(&t, options)?)
}

/// Complete-case design of a candidate: intercept, centered basis block of
/// the candidate column, then the remaining columns in order.
///
/// The candidate column is min-max normalized with its full observed range;
/// centering means come from the selected rows.
pub fn cc_design(
    table: &ObservationTable,
    candidate: &CandidateModel,
    spline: &SplineConfig,
    rows: &[usize],
) -> Result<Array2<f64>, AveragingError> {
    let j = candidate.column;
    let k = table.n_cols();
    let l = spline.basis_size();
    let cols = 1 + l + (k - 1);
    if rows.len() <= cols {
        return Err(AveragingError::InsufficientCompleteCases {
            n0: rows.len(),
            cols,
        });
    }
    let norm = NormalizationMap::fit(table, &[j]).map_err(FitError::from)?;
    let normalized: Vec<f64> = table.observed_values(j).iter().map(|&v| norm.apply(j, v)).collect();
    let spec = make_spec(spline, Some(&normalized)).map_err(FitError::from)?;
    let x = table.x();
    let mut g = Array2::zeros((rows.len(), cols));
    let mut buf = vec![0.0; l];
    for (r, &i) in rows.iter().enumerate() {
        g[(r, 0)] = 1.0;
        spec.eval_into(norm.apply(j, x[(i, j)]), &mut buf);
        for (c, v) in buf.iter().enumerate() {
            g[(r, 1 + c)] = *v;
        }
        for (c, col) in (0..k).filter(|&c| c != j).enumerate() {
            g[(r, 1 + l + c)] = x[(i, col)];
        }
    }
    let means = crate::spline::column_means(&g.slice(ndarray::s![.., 1..1 + l]).to_owned());
    for mut row in g.rows_mut() {
        for c in 0..l {
            row[1 + c] -= means[c];
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(FitError::DimensionMismatch("complete-case rows contain missing cells".into()).into());
    }
    Ok(g)
}

/// Diagonal of the orthogonal projector onto the column space of `g`.
pub fn hat_diag(g: ArrayView2<f64>) -> Result<Array1<f64>, AveragingError> {
    let qr = PivotedQr::new(g);
    if qr.rank() == 0 {
        return Err(AveragingError::SingularGram);
    }
    Ok(qr.projection_diag())
}

/// Leverages and ordinary residuals of the least squares fit of `y` on `g`.
pub fn leverage_and_residuals(
    g: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>), AveragingError> {
    let qr = PivotedQr::new(g);
    if qr.rank() == 0 {
        return Err(AveragingError::SingularGram);
    }
    let coef = qr.solve(y);
    let resid = &y - &g.dot(&coef);
    Ok((qr.projection_diag(), resid))
}

/// Leave-one-out residuals `(y_i - ŷ_i) / (1 - h_ii)`.
pub fn loo_residuals(g: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<Array1<f64>, AveragingError> {
    let (h, resid) = leverage_and_residuals(g, y)?;
    if let Some(unit) = h.iter().position(|&v| v >= 1.0 - LEVERAGE_MARGIN) {
        return Err(AveragingError::LeverageOne {
            unit,
            leverage: h[unit],
        });
    }
    Ok(&resid / &h.mapv(|v| 1.0 - v))
}

/// Leave-one-out residual columns, one per candidate, over complete cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvMatrix {
    pub matrix: Array2<f64>,
    /// Table rows behind each matrix row.
    pub rows: Vec<usize>,
    /// Complete cases dropped for leverage numerically equal to one.
    pub dropped: Vec<usize>,
}

impl CvMatrix {
    pub fn gram(&self) -> Array2<f64> {
        self.matrix.t().dot(&self.matrix)
    }
}

pub fn cv_matrix(
    table: &ObservationTable,
    candidates: &[CandidateModel],
    spline: &SplineConfig,
) -> Result<CvMatrix, AveragingError> {
    let rows = complete_case_subset(table);
    let y = Array1::from_iter(rows.iter().map(|&i| table.y()[i]));
    let per_candidate = candidates
        .iter()
        .map(|c| {
            let g = cc_design(table, c, spline, &rows)?;
            leverage_and_residuals(g.view(), y.view())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let keep: Vec<usize> = (0..rows.len())
        .filter(|&r| per_candidate.iter().all(|(h, _)| h[r] < 1.0 - LEVERAGE_MARGIN))
        .collect();
    let dropped = (0..rows.len())
        .filter(|r| !keep.contains(r))
        .map(|r| rows[r])
        .collect();
    let matrix = Array2::from_shape_fn((keep.len(), candidates.len()), |(r, c)| {
        let (h, e) = &per_candidate[c];
        e[keep[r]] / (1.0 - h[keep[r]])
    });
    Ok(CvMatrix {
        matrix,
        rows: keep.iter().map(|&r| rows[r]).collect(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Array1<f64>);

impl WeightVector {
    pub fn uniform(k: usize) -> Self {
        Self(Array1::from_elem(k, 1.0 / k as f64))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub weights: WeightVector,
    pub objective: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Minimizes `w^T Q w` over the simplex by pairwise mass exchange.
///
/// Starting from uniform weights, each step moves the optimal amount of mass
/// between two coordinates (exact line search along `e_b - e_a`). Pairs are
/// swept in lexicographic order until no transfer improves the objective by
/// more than `1e-12` (relative to `max(1, objective)`).
pub fn solve_simplex_qp(q: ArrayView2<f64>) -> QpSolution {
    let k = q.nrows();
    assert_eq!(q.ncols(), k, "Q must be square");
    if k == 1 {
        return QpSolution {
            weights: WeightVector(Array1::from_elem(1, 1.0)),
            objective: q[(0, 0)],
            sweeps: 0,
            converged: true,
        };
    }
    let mut w = Array1::from_elem(k, 1.0 / k as f64);
    let mut grad = q.dot(&w);
    let mut objective = w.dot(&grad);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < QP_MAX_SWEEPS {
        sweeps += 1;
        let mut improved = false;
        for a in 0..k {
            for b in a + 1..k {
                // move t from a to b; f(t) = f + 2t (g_b - g_a) + t^2 c
                let c = q[(a, a)] + q[(b, b)] - 2.0 * q[(a, b)];
                let slope = grad[b] - grad[a];
                let t = if c > 0.0 {
                    (-slope / c).clamp(-w[b], w[a])
                } else if slope < 0.0 {
                    w[a]
                } else if slope > 0.0 {
                    -w[b]
                } else {
                    0.0
                };
                let gain = -(2.0 * t * slope + t * t * c.max(0.0));
                if t == 0.0 || gain <= 1e-12 * objective.abs().max(1.0) {
                    continue;
                }
                if t == w[a] {
                    w[b] += w[a];
                    w[a] = 0.0;
                } else if t == -w[b] {
                    w[a] += w[b];
                    w[b] = 0.0;
                } else {
                    w[a] -= t;
                    w[b] += t;
                }
                for r in 0..k {
                    grad[r] += t * (q[(r, b)] - q[(r, a)]);
                }
                objective = w.dot(&grad);
                improved = true;
            }
        }
        if !improved {
            converged = true;
            break;
        }
        // resynchronise the running gradient
        grad = q.dot(&w);
        objective = w.dot(&grad);
    }
    QpSolution {
        weights: WeightVector(w),
        objective,
        sweeps,
        converged,
    }
}

/// Simplex weights minimizing `||e^cv w||^2`.
pub fn cv_weights(cv: ArrayView2<f64>) -> QpSolution {
    solve_simplex_qp(cv.t().dot(&cv).view())
}

/// Convex combination of candidate predictions on complete rows.
pub fn predict_averaged(
    fits: &[PrimeFit],
    weights: &WeightVector,
    rows: ArrayView2<f64>,
) -> Result<Array1<f64>, AveragingError> {
    if fits.len() != weights.len() {
        return Err(AveragingError::LengthMismatch {
            fits: fits.len(),
            weights: weights.len(),
        });
    }
    let mut out = Array1::zeros(rows.nrows());
    for (fit, &w) in fits.iter().zip(weights.as_array()) {
        if w != 0.0 {
            out.scaled_add(w, &fit.predict(rows)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingDiagnostics {
    /// Number of complete cases.
    pub n0: usize,
    /// Complete cases actually used after leverage screening.
    pub n_cv: usize,
    pub dropped_units: Vec<usize>,
    /// Weights fell back to uniform because the complete cases could not
    /// support the candidate designs.
    pub uniform_fallback: bool,
    pub fallback_reason: Option<String>,
    pub qp_sweeps: usize,
    pub qp_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedFit {
    pub candidates: Vec<CandidateModel>,
    pub fits: Vec<PrimeFit>,
    pub weights: WeightVector,
    pub objective: f64,
    pub diagnostics: AveragingDiagnostics,
}

impl AveragedFit {
    pub fn predict(&self, rows: ArrayView2<f64>) -> Result<Array1<f64>, AveragingError> {
        predict_averaged(&self.fits, &self.weights, rows)
    }
}

/// Candidate fits on all data plus complete-case jackknife weights.
pub fn fit_prime_ma(
    table: &ObservationTable,
    options: &FitOptions,
) -> Result<AveragedFit, AveragingError> {
    let candidates = build_candidates(table.n_cols())?;
    let fits = candidates
        .par_iter()
        .map(|c| fit_candidate_full(table, c, options))
        .collect::<Result<Vec<_>, _>>()?;

    let n0 = complete_case_subset(table).len();
    let k = candidates.len();
    let uniform = |reason: String, dropped: Vec<usize>, n_cv: usize| AveragingDiagnostics {
        n0,
        n_cv,
        dropped_units: dropped,
        uniform_fallback: true,
        fallback_reason: Some(reason),
        qp_sweeps: 0,
        qp_converged: false,
    };
    let (weights, objective, diagnostics) = match cv_matrix(table, &candidates, &options.spline) {
        Err(AveragingError::InsufficientCompleteCases { n0, cols }) => (
            WeightVector::uniform(k),
            f64::NAN,
            uniform(
                format!("{n0} complete cases for {cols}-column candidate designs"),
                Vec::new(),
                0,
            ),
        ),
        Err(e) => return Err(e),
        Ok(cv) if cv.rows.is_empty() => (
            WeightVector::uniform(k),
            f64::NAN,
            uniform("every complete case has leverage one".into(), cv.dropped, 0),
        ),
        Ok(cv) => {
            let sol = cv_weights(cv.matrix.view());
            (
                sol.weights,
                sol.objective,
                AveragingDiagnostics {
                    n0,
                    n_cv: cv.rows.len(),
                    dropped_units: cv.dropped,
                    uniform_fallback: false,
                    fallback_reason: None,
                    qp_sweeps: sol.sweeps,
                    qp_converged: sol.converged,
                },
            )
        }
    };
    Ok(AveragedFit {
        candidates,
        fits,
        weights,
        objective,
        diagnostics,
    })
}

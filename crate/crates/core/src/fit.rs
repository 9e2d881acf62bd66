//! PRIME fitting: partial-replacement design assembly and least squares.
//!
//! Each unit's row uses the basis row `a_j(X_ij)` for an observed nonlinear
//! covariate, its kernel replacement for a missing one, the raw value for an
//! observed linear covariate and its kernel replacement `Ŵ_ij` for a missing
//! one. Basis blocks are centered at their observed-row means and an
//! intercept column leads the design.

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_pattern_index, complete_case_subset, DatasetError, ModelStructure, NormalizationMap,
    ObservationTable, PatternIndex,
};
use crate::kernel::{ImputationDiagnostics, Imputer, KernelConfig, KernelError};
use crate::linalg::PivotedQr;
use crate::spline::{make_spec, SplineConfig, SplineError, SplineSpec};

pub const FIT_FILE_MAGIC: &str = "PRIME-FIT";
pub const FIT_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("underdetermined system: {rows} rows for {cols} columns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("only {n0} complete cases, need more than {needed}")]
    InsufficientCompleteCases { n0: usize, needed: usize },
    #[error("row {row} has a missing or non-finite value in column {column}")]
    IncompleteRow { row: usize, column: usize },
    #[error("column {0} is not a nonlinear column of this fit")]
    UnknownColumn(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("fit file: {0}")]
    FitFile(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub spline: SplineConfig,
    pub kernel: KernelConfig,
}

/// Regressor matrix with column labels and the centering means used for
/// each basis block.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: Array2<f64>,
    pub labels: Vec<String>,
    pub centering_means: Vec<Array1<f64>>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Column count `1 + p L + q`.
pub fn design_width(structure: &ModelStructure, basis_size: usize) -> usize {
    1 + structure.p() * basis_size + structure.q()
}

/// Builds the partial-replacement design. `table` must have its nonlinear
/// columns normalized; `specs` holds one spline spec per nonlinear column in
/// structure order.
pub fn assemble_design(
    table: &ObservationTable,
    pattern: &PatternIndex,
    specs: &[SplineSpec],
    config: &KernelConfig,
) -> Result<(DesignMatrix, ImputationDiagnostics), FitError> {
    let structure = table.structure();
    if specs.len() != structure.p() {
        return Err(FitError::DimensionMismatch(format!(
            "{} spline specs for {} nonlinear columns",
            specs.len(),
            structure.p()
        )));
    }
    let n = table.n();
    let width = 1 + specs.iter().map(SplineSpec::basis_size).sum::<usize>() + structure.q();
    let mut matrix = Array2::zeros((n, width));
    let mut labels = vec!["intercept".to_string()];
    matrix.column_mut(0).fill(1.0);
    let mut diagnostics = ImputationDiagnostics::new(table.n_cols());
    let needs_imputation = table.n_missing() > 0;
    let imputer = if needs_imputation {
        let imp = Imputer::new(table, pattern, config)?;
        diagnostics.degenerate_bandwidths = imp.degenerate_bandwidths().to_vec();
        Some(imp)
    } else {
        None
    };

    let mut centering_means = Vec::with_capacity(specs.len());
    let mut offset = 1;
    let x = table.x();
    for (&col, spec) in structure.nonlinear().iter().zip(specs) {
        let l = spec.basis_size();
        let name = &table.names()[col];
        labels.extend((1..=l).map(|k| format!("{name}:b{k}")));
        let mut observed_sum = Array1::<f64>::zeros(l);
        let mut observed_count = 0usize;
        for i in 0..n {
            let mut row = matrix.slice_mut(s![i, offset..offset + l]);
            if table.is_observed(i, col) {
                spec.eval_into(
                    x[(i, col)].clamp(0.0, 1.0),
                    row.as_slice_mut().expect("row-major design"),
                );
                observed_sum += &row;
                observed_count += 1;
            } else {
                let imp = imputer.as_ref().expect("imputer exists when cells are missing");
                let r = imp.impute_basis_row(i, col, spec)?;
                diagnostics.record(col, r.fallback, r.projected);
                row.assign(&r.value);
            }
        }
        if observed_count == 0 {
            return Err(DatasetError::DegenerateColumn { column: col }.into());
        }
        let means = observed_sum / observed_count as f64;
        for i in 0..n {
            let mut row = matrix.slice_mut(s![i, offset..offset + l]);
            row -= &means;
        }
        centering_means.push(means);
        offset += l;
    }
    for &col in structure.linear() {
        labels.push(table.names()[col].clone());
        for i in 0..n {
            matrix[(i, offset)] = match table.value(i, col) {
                Some(v) => v,
                None => {
                    let imp = imputer.as_ref().expect("imputer exists when cells are missing");
                    let r = imp.impute_linear_value(i, col)?;
                    diagnostics.record(col, r.fallback, r.projected);
                    r.value
                }
            };
        }
        offset += 1;
    }
    Ok((
        DesignMatrix {
            matrix,
            labels,
            centering_means,
        },
        diagnostics,
    ))
}

#[derive(Debug, Clone)]
pub struct LeastSquaresSolution {
    pub coefficients: Array1<f64>,
    pub fitted: Array1<f64>,
    pub rss: f64,
    pub rank: usize,
    pub condition: f64,
}

impl LeastSquaresSolution {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.coefficients.len()
    }
}

/// Minimum-norm least squares via column-pivoted QR.
pub fn solve_least_squares(
    design: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<LeastSquaresSolution, FitError> {
    let (rows, cols) = design.dim();
    if rows < cols {
        return Err(FitError::Underdetermined { rows, cols });
    }
    if y.len() != rows {
        return Err(FitError::DimensionMismatch(format!(
            "design has {rows} rows, response has {}",
            y.len()
        )));
    }
    let qr = PivotedQr::new(design);
    let coefficients = qr.solve(y);
    let fitted = design.dot(&coefficients);
    let rss = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(LeastSquaresSolution {
        coefficients,
        fitted,
        rss,
        rank: qr.rank(),
        condition: qr.condition_estimate(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_rows: usize,
    pub imputation: ImputationDiagnostics,
    pub rank: usize,
    /// `1 + p (L - 1) + q`: each centered basis block loses one direction.
    pub expected_rank: usize,
    pub rank_deficient: bool,
    pub condition: f64,
    pub rss: f64,
}

/// Fitted additive partially linear model, sufficient for prediction on
/// complete rows in the original covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimeFit {
    pub intercept: f64,
    /// Spline coefficients `b_j`, one block per nonlinear column.
    pub spline_coefficients: Vec<Array1<f64>>,
    /// Linear coefficients `β_j` in structure order.
    pub beta: Array1<f64>,
    pub structure: ModelStructure,
    pub specs: Vec<SplineSpec>,
    pub normalization: NormalizationMap,
    pub centering_means: Vec<Array1<f64>>,
    pub options: FitOptions,
    pub column_names: Vec<String>,
    pub diagnostics: FitDiagnostics,
}

impl PrimeFit {
    /// Coefficients in design-column order.
    pub fn coefficients(&self) -> Array1<f64> {
        let mut out = vec![self.intercept];
        for b in &self.spline_coefficients {
            out.extend(b.iter().copied());
        }
        out.extend(self.beta.iter().copied());
        Array1::from(out)
    }

    pub fn n_cols(&self) -> usize {
        self.structure.n_cols()
    }

    /// `β̂` keyed by covariate column.
    pub fn beta_by_column(&self) -> Vec<(usize, f64)> {
        self.structure
            .linear()
            .iter()
            .copied()
            .zip(self.beta.iter().copied())
            .collect()
    }

    fn block_value(&self, k: usize, raw: f64, buf: &mut [f64]) -> f64 {
        let col = self.structure.nonlinear()[k];
        let u = self.normalization.apply(col, raw);
        self.specs[k].eval_into(u, buf);
        buf.iter()
            .zip(self.centering_means[k].iter())
            .zip(self.spline_coefficients[k].iter())
            .map(|((a, m), b)| (a - m) * b)
            .sum()
    }

    /// Mean predictions for complete rows given in the original scale,
    /// with columns in table order.
    pub fn predict(&self, rows: ArrayView2<f64>) -> Result<Array1<f64>, FitError> {
        if rows.ncols() != self.n_cols() {
            return Err(FitError::DimensionMismatch(format!(
                "rows have {} columns, fit expects {}",
                rows.ncols(),
                self.n_cols()
            )));
        }
        let max_l = self.specs.iter().map(SplineSpec::basis_size).max().unwrap_or(0);
        let mut buf = vec![0.0; max_l];
        rows.outer_iter()
            .enumerate()
            .map(|(r, row)| {
                if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                    return Err(FitError::IncompleteRow { row: r, column: c });
                }
                let mut mu = self.intercept;
                for (k, &col) in self.structure.nonlinear().iter().enumerate() {
                    let l = self.specs[k].basis_size();
                    mu += self.block_value(k, row[col], &mut buf[..l]);
                }
                for (&col, b) in self.structure.linear().iter().zip(self.beta.iter()) {
                    mu += row[col] * b;
                }
                Ok(mu)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Array1::from)
    }

    /// `ĝ_j` on a grid of normalized values in `[0, 1]`.
    pub fn estimate_g(&self, column: usize, grid: &[f64]) -> Result<Array1<f64>, FitError> {
        let k = self
            .structure
            .nonlinear()
            .iter()
            .position(|&c| c == column)
            .ok_or(FitError::UnknownColumn(column))?;
        let spec = &self.specs[k];
        grid.iter()
            .map(|&u| {
                let a = spec.eval(u)?;
                Ok((a - &self.centering_means[k]).dot(&self.spline_coefficients[k]))
            })
            .collect::<Result<Vec<_>, FitError>>()
            .map(Array1::from)
    }

    /// Writes the versioned fit file: a magic line, then a JSON document
    /// holding the provenance block and every fitted field.
    pub fn write_fit_file<W: Write>(
        &self,
        mut writer: W,
        provenance: &serde_json::Value,
    ) -> Result<(), FitError> {
        writeln!(writer, "{FIT_FILE_MAGIC} {FIT_FILE_VERSION}")?;
        let doc = serde_json::json!({ "provenance": provenance, "fit": self });
        serde_json::to_writer_pretty(&mut writer, &doc)
            .map_err(|e| FitError::FitFile(e.to_string()))?;
        writeln!(writer)?;
        Ok(())
    }

    pub fn read_fit_file<R: BufRead>(mut reader: R) -> Result<(Self, serde_json::Value), FitError> {
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let expected = format!("{FIT_FILE_MAGIC} {FIT_FILE_VERSION}");
        if first.trim_end() != expected {
            return Err(FitError::FitFile(format!(
                "bad header '{}', expected '{expected}'",
                first.trim_end()
            )));
        }
        let mut doc: serde_json::Value =
            serde_json::from_reader(reader).map_err(|e| FitError::FitFile(e.to_string()))?;
        let provenance = doc["provenance"].take();
        let fit = serde_json::from_value(doc["fit"].take())
            .map_err(|e| FitError::FitFile(e.to_string()))?;
        Ok((fit, provenance))
    }
}

/// Normalize, index patterns, impute, assemble and solve.
pub fn fit_prime(table: &ObservationTable, options: &FitOptions) -> Result<PrimeFit, FitError> {
    let structure = table.structure().clone();
    let normalization = NormalizationMap::fit(table, structure.nonlinear())?;
    let normalized = normalization.transform(table);
    let pattern = build_pattern_index(&normalized);
    let specs = structure
        .nonlinear()
        .iter()
        .map(|&c| make_spec(&options.spline, Some(&normalized.observed_values(c))))
        .collect::<Result<Vec<_>, _>>()?;
    let (design, imputation) = assemble_design(&normalized, &pattern, &specs, &options.kernel)?;
    let solution = solve_least_squares(design.matrix.view(), table.y().view())?;

    let coef = &solution.coefficients;
    let mut offset = 1;
    let spline_coefficients = specs
        .iter()
        .map(|spec| {
            let b = coef.slice(s![offset..offset + spec.basis_size()]).to_owned();
            offset += spec.basis_size();
            b
        })
        .collect();
    let beta = coef.slice(s![offset..]).to_owned();
    let expected_rank =
        1 + specs.iter().map(|s| s.basis_size() - 1).sum::<usize>() + structure.q();
    Ok(PrimeFit {
        intercept: coef[0],
        spline_coefficients,
        beta,
        specs,
        normalization,
        centering_means: design.centering_means,
        options: options.clone(),
        column_names: table.names().to_vec(),
        diagnostics: FitDiagnostics {
            n_rows: table.n(),
            imputation,
            rank: solution.rank,
            expected_rank,
            rank_deficient: solution.rank < expected_rank,
            condition: solution.condition,
            rss: solution.rss,
        },
        structure,
    })
}

/// Complete-case fit: the same pipeline on the fully observed rows only.
pub fn fit_cc(table: &ObservationTable, options: &FitOptions) -> Result<PrimeFit, FitError> {
    let rows = complete_case_subset(table);
    let needed = design_width(table.structure(), options.spline.basis_size());
    if rows.len() <= needed {
        return Err(FitError::InsufficientCompleteCases {
            n0: rows.len(),
            needed,
        });
    }
    fit_prime(&table.select_rows(&rows)?, options)
}

/// Comparator: every missing cell replaced by its column's observed mean,
/// then an ordinary spline-plus-linear least squares fit.
pub fn fit_mean_impute(table: &ObservationTable, options: &FitOptions) -> Result<PrimeFit, FitError> {
    let mut x = table.x().clone();
    for j in 0..table.n_cols() {
        let vals = table.observed_values(j);
        if vals.is_empty() {
            return Err(DatasetError::DegenerateColumn { column: j }.into());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        x.column_mut(j).mapv_inplace(|v| if v.is_finite() { v } else { mean });
    }
    let filled = ObservationTable::complete(table.y().clone(), x, table.structure().clone())?
        .with_names(table.response_name(), table.names().to_vec())?;
    fit_prime(&filled, options)
}

//! Partially observed regression data.
//!
//! An [`ObservationTable`] holds the response, the covariate matrix and the
//! observation mask (`true` = observed). Unobserved cells are stored as `NaN`
//! and are never read as values. The declared split between covariates that
//! enter through a smooth function and covariates that enter linearly lives
//! in [`ModelStructure`].

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed CSV at row {row}, column '{column}': cannot parse '{value}' as a finite number")]
    MalformedCsv {
        row: usize,
        column: String,
        value: String,
    },
    #[error("CSV read error: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("response is missing at row {row}")]
    MissingResponse { row: usize },
    #[error("declared column '{column}' is not present in the CSV header")]
    StructureMismatch { column: String },
    #[error("invalid model structure: {0}")]
    InvalidStructure(String),
    #[error("invalid structure file: {0}")]
    InvalidStructureFile(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("observed cell ({row}, {column}) is not finite")]
    NonFinite { row: usize, column: usize },
    #[error("column {column} has fewer than two distinct observed values")]
    DegenerateColumn { column: usize },
    #[error("table has no rows")]
    Empty,
}

/// Which covariate columns are modelled nonparametrically and which linearly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStructure {
    nonlinear: Vec<usize>,
    linear: Vec<usize>,
}

impl ModelStructure {
    pub fn new(
        nonlinear: Vec<usize>,
        linear: Vec<usize>,
        n_cols: usize,
    ) -> Result<Self, DatasetError> {
        if nonlinear.len() + linear.len() == 0 {
            return Err(DatasetError::InvalidStructure(
                "at least one covariate is required".into(),
            ));
        }
        let mut seen = vec![false; n_cols];
        for &c in nonlinear.iter().chain(linear.iter()) {
            if c >= n_cols {
                return Err(DatasetError::InvalidStructure(format!(
                    "column {c} out of range for {n_cols} covariates"
                )));
            }
            if seen[c] {
                return Err(DatasetError::InvalidStructure(format!(
                    "column {c} declared more than once"
                )));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DatasetError::InvalidStructure(format!(
                "column {c} is neither nonlinear nor linear"
            )));
        }
        Ok(Self { nonlinear, linear })
    }

    /// First `p` columns nonlinear, the remaining `q` linear.
    pub fn leading(p: usize, q: usize) -> Result<Self, DatasetError> {
        Self::new((0..p).collect(), (p..p + q).collect(), p + q)
    }

    pub fn all_linear(n_cols: usize) -> Result<Self, DatasetError> {
        Self::new(Vec::new(), (0..n_cols).collect(), n_cols)
    }

    pub fn nonlinear(&self) -> &[usize] {
        &self.nonlinear
    }

    pub fn linear(&self) -> &[usize] {
        &self.linear
    }

    pub fn p(&self) -> usize {
        self.nonlinear.len()
    }

    pub fn q(&self) -> usize {
        self.linear.len()
    }

    pub fn n_cols(&self) -> usize {
        self.p() + self.q()
    }

    pub fn is_nonlinear(&self, column: usize) -> bool {
        self.nonlinear.contains(&column)
    }
}

/// Response vector, covariates and observation mask.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    y: Array1<f64>,
    x: Array2<f64>,
    mask: Array2<bool>,
    structure: ModelStructure,
    names: Vec<String>,
    response_name: String,
}

impl ObservationTable {
    /// Builds a table, blanking every unobserved cell to `NaN`.
    pub fn new(
        y: Array1<f64>,
        mut x: Array2<f64>,
        mask: Array2<bool>,
        structure: ModelStructure,
    ) -> Result<Self, DatasetError> {
        let n = y.len();
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        if x.nrows() != n || mask.dim() != x.dim() {
            return Err(DatasetError::DimensionMismatch(format!(
                "y has {n} rows, x is {:?}, mask is {:?}",
                x.dim(),
                mask.dim()
            )));
        }
        if structure.n_cols() != x.ncols() {
            return Err(DatasetError::DimensionMismatch(format!(
                "structure declares {} columns, x has {}",
                structure.n_cols(),
                x.ncols()
            )));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::MissingResponse { row });
        }
        for ((i, j), v) in x.indexed_iter_mut() {
            if mask[(i, j)] {
                if !v.is_finite() {
                    return Err(DatasetError::NonFinite { row: i, column: j });
                }
            } else {
                *v = f64::NAN;
            }
        }
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            y,
            x,
            mask,
            structure,
            names,
            response_name: "y".to_string(),
        })
    }

    /// Fully observed table.
    pub fn complete(
        y: Array1<f64>,
        x: Array2<f64>,
        structure: ModelStructure,
    ) -> Result<Self, DatasetError> {
        let mask = Array2::from_elem(x.dim(), true);
        Self::new(y, x, mask, structure)
    }

    pub fn with_names(
        mut self,
        response_name: impl Into<String>,
        names: Vec<String>,
    ) -> Result<Self, DatasetError> {
        if names.len() != self.n_cols() {
            return Err(DatasetError::DimensionMismatch(format!(
                "{} names for {} columns",
                names.len(),
                self.n_cols()
            )));
        }
        self.names = names;
        self.response_name = response_name.into();
        Ok(self)
    }

    /// Same data under a different nonlinear/linear split.
    pub fn with_structure(&self, structure: ModelStructure) -> Result<Self, DatasetError> {
        if structure.n_cols() != self.n_cols() {
            return Err(DatasetError::DimensionMismatch(format!(
                "structure declares {} columns, table has {}",
                structure.n_cols(),
                self.n_cols()
            )));
        }
        let mut out = self.clone();
        out.structure = structure;
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Raw covariate matrix; unobserved cells hold `NaN`.
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn is_observed(&self, row: usize, column: usize) -> bool {
        self.mask[(row, column)]
    }

    pub fn value(&self, row: usize, column: usize) -> Option<f64> {
        self.mask[(row, column)].then(|| self.x[(row, column)])
    }

    pub fn observed_values(&self, column: usize) -> Vec<f64> {
        (0..self.n())
            .filter_map(|i| self.value(i, column))
            .collect()
    }

    pub fn is_complete_row(&self, row: usize) -> bool {
        self.mask.row(row).iter().all(|&m| m)
    }

    pub fn n_missing(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Sub-table of the given rows, in the given order (duplicates allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, DatasetError> {
        if rows.is_empty() {
            return Err(DatasetError::Empty);
        }
        let y = Array1::from_iter(rows.iter().map(|&i| self.y[i]));
        let x = self.x.select(ndarray::Axis(0), rows);
        let mask = self.mask.select(ndarray::Axis(0), rows);
        Ok(Self {
            y,
            x,
            mask,
            structure: self.structure.clone(),
            names: self.names.clone(),
            response_name: self.response_name.clone(),
        })
    }

    pub(crate) fn x_mut(&mut self) -> &mut Array2<f64> {
        &mut self.x
    }

    /// Writes the table as CSV with the response first.
    pub fn write_csv<W: Write>(&self, writer: W, missing_token: &str) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.response_name.clone()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format_real(self.y[i])];
            for j in 0..self.n_cols() {
                rec.push(match self.value(i, j) {
                    Some(v) => format_real(v),
                    None => missing_token.to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}

/// Column roles read from a structure file.
///
/// The file is a small TOML document:
///
/// ```text
/// response  = "y"
/// nonlinear = ["x1", "x2", "x3"]
/// linear    = ["x4", "x5"]
/// ```
///
/// Covariates are loaded in the order nonlinear then linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    pub response: String,
    #[serde(default)]
    pub nonlinear: Vec<String>,
    #[serde(default)]
    pub linear: Vec<String>,
}

impl StructureFile {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let parsed: Self =
            toml::from_str(text).map_err(|e| DatasetError::InvalidStructureFile(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for name in parsed.nonlinear.iter().chain(parsed.linear.iter()) {
            if name == &parsed.response || !seen.insert(name.as_str()) {
                return Err(DatasetError::InvalidStructureFile(format!(
                    "column '{name}' listed twice"
                )));
            }
        }
        if seen.is_empty() {
            return Err(DatasetError::InvalidStructureFile(
                "no covariates listed".into(),
            ));
        }
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn covariates(&self) -> Vec<String> {
        self.nonlinear
            .iter()
            .chain(self.linear.iter())
            .cloned()
            .collect()
    }

    pub fn model_structure(&self) -> Result<ModelStructure, DatasetError> {
        ModelStructure::leading(self.nonlinear.len(), self.linear.len())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("structure file serializes")
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub missing_token: String,
    /// Silently skip rows whose response is missing instead of failing.
    pub drop_missing_response: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            missing_token: DEFAULT_MISSING_TOKEN.to_string(),
            drop_missing_response: false,
        }
    }
}

fn is_missing(cell: &str, token: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == token
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, DatasetError> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DatasetError::MalformedCsv {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        })
}

/// Loads a CSV whose header names the response and every declared covariate.
/// Rows are numbered from 1 (first data row) in error messages.
pub fn load_csv(
    path: &Path,
    structure: &StructureFile,
    options: &LoadOptions,
) -> Result<ObservationTable, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, structure, options)
}

pub fn read_csv<R: Read>(
    reader: R,
    structure: &StructureFile,
    options: &LoadOptions,
) -> Result<ObservationTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let position: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let lookup = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| DatasetError::StructureMismatch {
                column: name.to_string(),
            })
    };
    let response_col = lookup(&structure.response)?;
    let covariates = structure.covariates();
    let cov_cols = covariates
        .iter()
        .map(|c| lookup(c))
        .collect::<Result<Vec<_>, _>>()?;

    let token = options.missing_token.as_str();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut mask = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = record.get(response_col).unwrap_or("");
        if is_missing(cell, token) {
            if options.drop_missing_response {
                continue;
            }
            return Err(DatasetError::MissingResponse { row });
        }
        y.push(parse_cell(cell, row, &structure.response)?);
        for (name, &c) in covariates.iter().zip(&cov_cols) {
            let cell = record.get(c).unwrap_or("");
            if is_missing(cell, token) {
                x.push(f64::NAN);
                mask.push(false);
            } else {
                x.push(parse_cell(cell, row, name)?);
                mask.push(true);
            }
        }
    }
    let n = y.len();
    let k = covariates.len();
    let x = Array2::from_shape_vec((n, k), x).expect("row-major shape");
    let mask = Array2::from_shape_vec((n, k), mask).expect("row-major shape");
    ObservationTable::new(Array1::from(y), x, mask, structure.model_structure()?)?
        .with_names(structure.response.clone(), covariates)
}

/// Column names from a CSV header row.
pub fn read_csv_header(path: &Path) -> Result<Vec<String>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_path(path)?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Covariate matrix for prediction, columns picked from the header by name.
/// Missing cells become `NaN`; other columns are ignored.
pub fn read_covariate_rows<R: Read>(
    reader: R,
    names: &[String],
    missing_token: &str,
) -> Result<Array2<f64>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Headers).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| DatasetError::StructureMismatch { column: n.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut x = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        for (name, &c) in names.iter().zip(&cols) {
            let cell = record.get(c).unwrap_or("");
            x.push(if is_missing(cell, missing_token) {
                f64::NAN
            } else {
                parse_cell(cell, r + 1, name)?
            });
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, names.len()), x).expect("row-major shape"))
}

/// Observed/missing index sets of one unit. Column indices are in structure
/// order for the nonlinear/linear sets and ascending for `observed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPattern {
    pub observed_nonlinear: Vec<usize>,
    pub observed_linear: Vec<usize>,
    pub missing_nonlinear: Vec<usize>,
    pub missing_linear: Vec<usize>,
    pub observed: Vec<usize>,
}

impl UnitPattern {
    pub fn m(&self) -> usize {
        self.observed.len()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_nonlinear.is_empty() && self.missing_linear.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PatternIndex {
    units: Vec<UnitPattern>,
}

impl PatternIndex {
    pub fn units(&self) -> &[UnitPattern] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &UnitPattern {
        &self.units[i]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Distinct observed sets `C_i`, in order of first appearance.
    pub fn distinct_patterns(&self) -> Vec<Vec<usize>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in &self.units {
            if seen.insert(u.observed.clone()) {
                out.push(u.observed.clone());
            }
        }
        out
    }

    pub fn min_m(&self) -> usize {
        self.units.iter().map(UnitPattern::m).min().unwrap_or(0)
    }
}

pub fn build_pattern_index(table: &ObservationTable) -> PatternIndex {
    let s = table.structure();
    let units = (0..table.n())
        .map(|i| {
            let split = |cols: &[usize]| -> (Vec<usize>, Vec<usize>) {
                cols.iter().partition(|&&j| table.is_observed(i, j))
            };
            let (observed_nonlinear, missing_nonlinear) = split(s.nonlinear());
            let (observed_linear, missing_linear) = split(s.linear());
            let observed = (0..table.n_cols())
                .filter(|&j| table.is_observed(i, j))
                .collect();
            UnitPattern {
                observed_nonlinear,
                observed_linear,
                missing_nonlinear,
                missing_linear,
                observed,
            }
        })
        .collect();
    PatternIndex { units }
}

/// Training range of one nonlinear column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnRange {
    pub column: usize,
    pub min: f64,
    pub max: f64,
}

/// Min-max ranges for the nonlinear columns; maps values into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizationMap {
    ranges: Vec<ColumnRange>,
}

impl NormalizationMap {
    pub fn from_ranges(ranges: Vec<ColumnRange>) -> Result<Self, DatasetError> {
        for r in &ranges {
            if !(r.min < r.max) {
                return Err(DatasetError::DegenerateColumn { column: r.column });
            }
        }
        Ok(Self { ranges })
    }

    /// Observed ranges of the given columns.
    pub fn fit(table: &ObservationTable, columns: &[usize]) -> Result<Self, DatasetError> {
        let ranges = columns
            .iter()
            .map(|&column| {
                let (min, max) = table
                    .observed_values(column)
                    .into_iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                if !(min < max) {
                    return Err(DatasetError::DegenerateColumn { column });
                }
                Ok(ColumnRange { column, min, max })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[ColumnRange] {
        &self.ranges
    }

    pub fn range(&self, column: usize) -> Option<&ColumnRange> {
        self.ranges.iter().find(|r| r.column == column)
    }

    /// Maps a value of `column` into `[0, 1]`, clamping out-of-range inputs.
    /// Columns without a recorded range pass through unchanged.
    pub fn apply(&self, column: usize, value: f64) -> f64 {
        match self.range(column) {
            Some(r) => ((value - r.min) / (r.max - r.min)).clamp(0.0, 1.0),
            None => value,
        }
    }

    pub fn inverse(&self, column: usize, value: f64) -> f64 {
        match self.range(column) {
            Some(r) => r.min + value * (r.max - r.min),
            None => value,
        }
    }

    /// Applies the map to every observed cell of a table.
    pub fn transform(&self, table: &ObservationTable) -> ObservationTable {
        let mut out = table.clone();
        for r in &self.ranges {
            for i in 0..out.n() {
                if out.is_observed(i, r.column) {
                    let v = out.x()[(i, r.column)];
                    out.x_mut()[(i, r.column)] = self.apply(r.column, v);
                }
            }
        }
        out
    }

    /// Applies the map to a complete covariate row.
    pub fn transform_row(&self, row: ArrayView1<f64>) -> Array1<f64> {
        let mut out = row.to_owned();
        for r in &self.ranges {
            out[r.column] = self.apply(r.column, out[r.column]);
        }
        out
    }
}

/// Min-max normalizes the observed entries of every nonlinear column.
pub fn minmax_normalize(
    table: &ObservationTable,
) -> Result<(ObservationTable, NormalizationMap), DatasetError> {
    let map = NormalizationMap::fit(table, table.structure().nonlinear())?;
    Ok((map.transform(table), map))
}

/// Indices of the fully observed rows.
pub fn complete_case_subset(table: &ObservationTable) -> Vec<usize> {
    (0..table.n())
        .filter(|&i| table.is_complete_row(i))
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Observation mask of the 10-subject, 8-covariate layout with
    /// three nonlinear and five linear covariates.
    pub const TABLE1_MASK: [[u8; 8]; 10] = [
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 0, 1, 1, 0, 0, 0],
        [1, 1, 0, 1, 1, 0, 0, 0],
        [1, 1, 1, 0, 1, 0, 1, 1],
        [1, 1, 1, 0, 1, 0, 1, 1],
        [1, 1, 1, 0, 1, 1, 1, 1],
        [1, 1, 1, 0, 1, 1, 1, 1],
        [1, 0, 0, 1, 0, 1, 1, 1],
        [1, 0, 0, 1, 0, 1, 1, 1],
    ];

    pub fn table1() -> ObservationTable {
        let n = 10;
        let x = Array2::from_shape_fn((n, 8), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 / 10.0 + 0.05 * j as f64
        });
        let mask = Array2::from_shape_fn((n, 8), |(i, j)| TABLE1_MASK[i][j] == 1);
        let y = Array1::from_shape_fn(n, |i| i as f64 * 0.3 - 1.0);
        ObservationTable::new(y, x, mask, ModelStructure::leading(3, 5).unwrap()).unwrap()
    }
}

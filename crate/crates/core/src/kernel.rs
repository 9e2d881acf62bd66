//! Nadaraya-Watson conditional-mean replacement of missing regressors.
//!
//! For a unit `i` with observed column set `C_i` and a missing column `j`,
//! the donors are the units observing every column of `C_i ∪ {j}`. The
//! replacement is the kernel-weighted donor average of `X_{i'j}` (linear
//! columns) or of the basis row `a_j(X_{i'j})` (nonlinear columns), with
//! weights from a Gaussian product kernel on the observed covariates, or,
//! for units observing many columns, the geometric mean of univariate
//! kernels along random projections of the difference vector.
//!
//! All weights are handled in log space.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ObservationTable, PatternIndex};
use crate::spline::SplineSpec;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Donor sets whose largest log-weight falls below this are treated as empty.
pub const LOG_WEIGHT_FLOOR: f64 = -700.0;
pub const DEFAULT_PROJECTION_THRESHOLD: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("bandwidth must be finite and positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("fixed bandwidth has {found} entries, expected 1 or {expected}")]
    BandwidthLength { expected: usize, found: usize },
    #[error("projection needs 1 <= B <= threshold ({threshold}), got B = {directions}")]
    InvalidProjection { directions: usize, threshold: usize },
    #[error("column {column} is observed for unit {unit}; nothing to impute")]
    NotMissing { unit: usize, column: usize },
    #[error("column {column} is not a {expected} column")]
    WrongColumnKind {
        column: usize,
        expected: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `1.06 * sd * n^(-1/5)` per covariate column.
    #[default]
    Silverman,
    /// One bandwidth per covariate column, or a single value for all.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionDist {
    StandardNormal,
    /// `U(-1, 1) * sqrt(3)`, unit second moment.
    ScaledUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    None,
    Resampled {
        directions: usize,
        dist: DirectionDist,
    },
}

pub const DEFAULT_DIRECTIONS: usize = 3;

impl Default for Projection {
    fn default() -> Self {
        Projection::Resampled {
            directions: DEFAULT_DIRECTIONS,
            dist: DirectionDist::StandardNormal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: BandwidthRule,
    pub projection: Projection,
    /// Projection is used for units observing more than this many columns.
    pub projection_threshold: usize,
    pub seed: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthRule::Silverman,
            projection: Projection::default(),
            projection_threshold: DEFAULT_PROJECTION_THRESHOLD,
            seed: 0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), KernelError> {
        if let BandwidthRule::Fixed(h) = &self.bandwidth {
            if let Some(&bad) = h.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(KernelError::InvalidBandwidth(bad));
            }
        }
        if let Projection::Resampled { directions, .. } = self.projection {
            // every projected unit has m_i > threshold >= B
            if directions == 0 || directions > self.projection_threshold {
                return Err(KernelError::InvalidProjection {
                    directions,
                    threshold: self.projection_threshold,
                });
            }
        }
        Ok(())
    }
}

/// Silverman bandwidth together with a flag for the zero-variance fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilvermanBandwidth {
    pub h: f64,
    pub degenerate: bool,
}

/// `h = 1.06 * sd * n^(-1/5)` with the `n - 1` sample standard deviation.
/// A sample with zero spread falls back to `1.06 * n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64], n: usize) -> SilvermanBandwidth {
    let scale = 1.06 * (n.max(1) as f64).powf(-0.2);
    let sd = sample_sd(values);
    if sd > 0.0 && sd.is_finite() {
        SilvermanBandwidth {
            h: scale * sd,
            degenerate: false,
        }
    } else {
        SilvermanBandwidth {
            h: scale,
            degenerate: true,
        }
    }
}

pub(crate) fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// `log(K(t / h) / h)` for the standard normal density `K`.
#[inline]
pub fn log_gaussian_kernel(t: f64, h: f64) -> f64 {
    let z = t / h;
    -0.5 * z * z - h.ln() - LN_SQRT_2PI
}

pub fn log_product_kernel_weight(diff: &[f64], h: &[f64]) -> f64 {
    assert_eq!(diff.len(), h.len(), "difference and bandwidth lengths differ");
    diff.iter().zip(h).map(|(&d, &h)| log_gaussian_kernel(d, h)).sum()
}

/// `prod_j K(diff_j / h_j) / h_j`.
pub fn product_kernel_weight(diff: &[f64], h: &[f64]) -> f64 {
    log_product_kernel_weight(diff, h).exp()
}

/// `B` random directions of length `m`, i.i.d. entries with unit second
/// moment. Deterministic in `seed`.
pub fn draw_directions(m: usize, count: usize, dist: DirectionDist, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new_inclusive(-1.0f64, 1.0).expect("valid range");
    let sqrt3 = 3.0f64.sqrt();
    (0..count)
        .map(|_| {
            (0..m)
                .map(|_| match dist {
                    DirectionDist::StandardNormal => StandardNormal.sample(&mut rng),
                    DirectionDist::ScaledUniform => uniform.sample(&mut rng) * sqrt3,
                })
                .collect()
        })
        .collect()
}

pub fn log_projected_kernel_weight(diff: &[f64], directions: &[Vec<f64>], h: f64) -> f64 {
    let b = directions.len() as f64;
    directions
        .iter()
        .map(|v| {
            assert_eq!(v.len(), diff.len(), "direction length differs from difference");
            let t: f64 = diff.iter().zip(v).map(|(d, v)| d * v).sum();
            log_gaussian_kernel(t, h)
        })
        .sum::<f64>()
        / b
}

/// Geometric mean over directions of `K_h(diff · v_b)`.
pub fn projected_kernel_weight(diff: &[f64], directions: &[Vec<f64>], h: f64) -> f64 {
    log_projected_kernel_weight(diff, directions, h).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    NoDonors,
    Underflow,
}

/// Per-column counts of replacements that fell back to the column mean.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImputationDiagnostics {
    pub no_donors: Vec<usize>,
    pub underflow: Vec<usize>,
    pub imputed_cells: usize,
    pub projected_cells: usize,
    pub degenerate_bandwidths: Vec<usize>,
}

impl ImputationDiagnostics {
    pub fn new(n_cols: usize) -> Self {
        Self {
            no_donors: vec![0; n_cols],
            underflow: vec![0; n_cols],
            ..Default::default()
        }
    }

    pub fn record(&mut self, column: usize, fallback: Option<FallbackReason>, projected: bool) {
        self.imputed_cells += 1;
        if projected {
            self.projected_cells += 1;
        }
        match fallback {
            Some(FallbackReason::NoDonors) => self.no_donors[column] += 1,
            Some(FallbackReason::Underflow) => self.underflow[column] += 1,
            None => {}
        }
    }

    pub fn total_fallbacks(&self) -> usize {
        self.no_donors.iter().sum::<usize>() + self.underflow.iter().sum::<usize>()
    }
}

/// Normalized donor weights for one (unit, column) target.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorWeights {
    pub donors: Vec<usize>,
    pub weights: Vec<f64>,
    pub projected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputed<T> {
    pub value: T,
    pub fallback: Option<FallbackReason>,
    pub projected: bool,
}

#[derive(Debug, Clone)]
struct PatternProjection {
    directions: Vec<Vec<f64>>,
    h: f64,
}

/// Kernel imputation over one table. Nonlinear columns of `table` must
/// already be normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Imputer<'a> {
    table: &'a ObservationTable,
    pattern: &'a PatternIndex,
    config: KernelConfig,
    bandwidths: Vec<f64>,
    degenerate: Vec<usize>,
    projections: HashMap<Vec<usize>, PatternProjection>,
}

impl<'a> Imputer<'a> {
    pub fn new(
        table: &'a ObservationTable,
        pattern: &'a PatternIndex,
        config: &KernelConfig,
    ) -> Result<Self, KernelError> {
        config.validate()?;
        let k = table.n_cols();
        let mut degenerate = Vec::new();
        let bandwidths = match &config.bandwidth {
            BandwidthRule::Silverman => (0..k)
                .map(|j| {
                    let bw = silverman_bandwidth(&table.observed_values(j), table.n());
                    if bw.degenerate {
                        degenerate.push(j);
                    }
                    bw.h
                })
                .collect(),
            BandwidthRule::Fixed(h) if h.len() == 1 => vec![h[0]; k],
            BandwidthRule::Fixed(h) if h.len() == k => h.clone(),
            BandwidthRule::Fixed(h) => {
                return Err(KernelError::BandwidthLength {
                    expected: k,
                    found: h.len(),
                })
            }
        };
        let mut imputer = Self {
            table,
            pattern,
            config: config.clone(),
            bandwidths,
            degenerate,
            projections: HashMap::new(),
        };
        if let Projection::Resampled { directions, dist } = config.projection {
            for cols in pattern.distinct_patterns() {
                let needs_imputation = pattern
                    .units()
                    .iter()
                    .any(|u| u.observed == cols && !u.is_complete());
                if cols.len() > config.projection_threshold && needs_imputation {
                    let seed = pattern_seed(config.seed, &cols);
                    let dirs = draw_directions(cols.len(), directions, dist, seed);
                    let h = imputer.projected_bandwidth(&cols, &dirs);
                    imputer
                        .projections
                        .insert(cols, PatternProjection { directions: dirs, h });
                }
            }
        }
        Ok(imputer)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Columns whose Silverman bandwidth used the zero-variance fallback.
    pub fn degenerate_bandwidths(&self) -> &[usize] {
        &self.degenerate
    }

    pub fn table(&self) -> &ObservationTable {
        self.table
    }

    /// Scalar bandwidth for projected differences of one pattern: Silverman
    /// on the projections of every unit observing the pattern (pooled over
    /// directions); root-sum-square of the column bandwidths under a fixed
    /// rule.
    fn projected_bandwidth(&self, cols: &[usize], dirs: &[Vec<f64>]) -> f64 {
        if let BandwidthRule::Fixed(_) = self.config.bandwidth {
            return cols.iter().map(|&c| self.bandwidths[c].powi(2)).sum::<f64>().sqrt();
        }
        let holders: Vec<usize> = (0..self.table.n())
            .filter(|&i| cols.iter().all(|&c| self.table.is_observed(i, c)))
            .collect();
        let mut pooled_var = 0.0;
        for v in dirs {
            let proj: Vec<f64> = holders
                .iter()
                .map(|&i| cols.iter().zip(v).map(|(&c, w)| self.table.x()[(i, c)] * w).sum())
                .collect();
            pooled_var += sample_sd(&proj).powi(2);
        }
        let sd = (pooled_var / dirs.len() as f64).sqrt();
        let scale = 1.06 * (self.table.n() as f64).powf(-0.2);
        if sd > 0.0 && sd.is_finite() {
            scale * sd
        } else {
            scale
        }
    }

    /// Units observing every column of `C_i` and column `j`.
    pub fn donors(&self, unit: usize, column: usize) -> Vec<usize> {
        let cols = &self.pattern.unit(unit).observed;
        (0..self.table.n())
            .filter(|&d| {
                self.table.is_observed(d, column)
                    && cols.iter().all(|&c| self.table.is_observed(d, c))
            })
            .collect()
    }

    /// Normalized Nadaraya-Watson weights, or the reason a fallback is needed.
    pub fn donor_weights(&self, unit: usize, column: usize) -> Result<DonorWeights, FallbackReason> {
        let donors = self.donors(unit, column);
        if donors.is_empty() {
            return Err(FallbackReason::NoDonors);
        }
        let cols = &self.pattern.unit(unit).observed;
        let x = self.table.x();
        let target: Vec<f64> = cols.iter().map(|&c| x[(unit, c)]).collect();
        let projection = self.projections.get(cols);
        let h: Vec<f64> = cols.iter().map(|&c| self.bandwidths[c]).collect();
        let mut diff = vec![0.0; cols.len()];
        let log_w: Vec<f64> = donors
            .iter()
            .map(|&d| {
                for (k, &c) in cols.iter().enumerate() {
                    diff[k] = x[(d, c)] - target[k];
                }
                match projection {
                    Some(p) => log_projected_kernel_weight(&diff, &p.directions, p.h),
                    None => log_product_kernel_weight(&diff, &h),
                }
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max >= LOG_WEIGHT_FLOOR) {
            return Err(FallbackReason::Underflow);
        }
        let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(DonorWeights {
            donors,
            weights: raw.into_iter().map(|w| w / total).collect(),
            projected: projection.is_some(),
        })
    }

    fn check_missing(&self, unit: usize, column: usize, nonlinear: bool) -> Result<(), KernelError> {
        if self.table.is_observed(unit, column) {
            return Err(KernelError::NotMissing { unit, column });
        }
        if self.table.structure().is_nonlinear(column) != nonlinear {
            return Err(KernelError::WrongColumnKind {
                column,
                expected: if nonlinear { "nonlinear" } else { "linear" },
            });
        }
        Ok(())
    }

    fn observed_mean(&self, column: usize) -> f64 {
        let vals = self.table.observed_values(column);
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Kernel estimate of a missing linear covariate `W_ij`.
    pub fn impute_linear_value(&self, unit: usize, column: usize) -> Result<Imputed<f64>, KernelError> {
        self.check_missing(unit, column, false)?;
        let x = self.table.x();
        Ok(match self.donor_weights(unit, column) {
            Ok(dw) => Imputed {
                value: dw
                    .donors
                    .iter()
                    .zip(&dw.weights)
                    .map(|(&d, w)| w * x[(d, column)])
                    .sum(),
                fallback: None,
                projected: dw.projected,
            },
            Err(reason) => Imputed {
                value: self.observed_mean(column),
                fallback: Some(reason),
                projected: false,
            },
        })
    }

    /// Kernel estimate of the basis row `a_j(X_ij)` of a missing nonlinear
    /// covariate; one weight vector is shared by all basis components.
    pub fn impute_basis_row(
        &self,
        unit: usize,
        column: usize,
        spec: &SplineSpec,
    ) -> Result<Imputed<Array1<f64>>, KernelError> {
        self.check_missing(unit, column, true)?;
        let x = self.table.x();
        let l = spec.basis_size();
        let mut row = Array1::zeros(l);
        let mut buf = vec![0.0; l];
        let (fallback, projected) = match self.donor_weights(unit, column) {
            Ok(dw) => {
                for (&d, &w) in dw.donors.iter().zip(&dw.weights) {
                    spec.eval_into(x[(d, column)].clamp(0.0, 1.0), &mut buf);
                    row.iter_mut().zip(&buf).for_each(|(r, b)| *r += w * b);
                }
                (None, dw.projected)
            }
            Err(reason) => {
                let vals = self.table.observed_values(column);
                for &v in &vals {
                    spec.eval_into(v.clamp(0.0, 1.0), &mut buf);
                    row.iter_mut().zip(&buf).for_each(|(r, b)| *r += b);
                }
                row /= vals.len().max(1) as f64;
                (Some(reason), false)
            }
        };
        Ok(Imputed {
            value: row,
            fallback,
            projected,
        })
    }
}

/// Seed for the directions of one observed-column pattern.
fn pattern_seed(seed: u64, cols: &[usize]) -> u64 {
    // FNV-1a over the column indices, then mixed with the global seed
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &c in cols {
        for byte in (c as u64).to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    splitmix64(seed ^ hash)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal density.
pub fn gaussian_density(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

//! Monte Carlo study harness: the eight-covariate partially linear
//! generator, R²-calibrated noise, group-block missingness, a replication
//! driver and PE/MSE metrics.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::averaging::fit_prime_ma;
use crate::dataset::{format_real, ModelStructure, ObservationTable};
use crate::fit::{fit_cc, fit_mean_impute, fit_prime, FitOptions};
use crate::linalg::cholesky;

pub const N_COVARIATES: usize = 8;
pub const P_NONLINEAR: usize = 3;
pub const BETA: [f64; 5] = [1.0, -1.5, 1.0, -1.2, 0.4];
/// Column groups deleted as blocks; group 1 is never deleted.
pub const GROUPS: [[usize; 2]; 4] = [[0, 1], [2, 3], [4, 5], [6, 7]];
pub const CALIBRATION_DRAWS: usize = 100_000;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("unknown scenario keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("mean samples have zero variance")]
    DegenerateMu,
    #[error("PRIME results are required as the ratio baseline")]
    MissingBaseline,
    #[error("summary schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RhoMode {
    /// Equal correlation between every pair of normal covariates.
    Constant(f64),
    /// Correlation `r^{|i-j|}`.
    Ar(f64),
}

impl RhoMode {
    pub fn covariance(&self) -> Array2<f64> {
        Array2::from_shape_fn((5, 5), |(i, j)| {
            if i == j {
                1.0
            } else {
                match *self {
                    RhoMode::Constant(r) => r,
                    RhoMode::Ar(r) => r.powi((i as i32 - j as i32).abs()),
                }
            }
        })
    }
}

impl fmt::Display for RhoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhoMode::Constant(r) => write!(f, "{r}"),
            RhoMode::Ar(r) => write!(f, "ar:{r}"),
        }
    }
}

impl FromStr for RhoMode {
    type Err = SimulationError;

    /// `"0.3"`, `"constant:0.3"`, `"ar"` (0.8) or `"ar:0.8"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimulationError::InvalidConfig(format!("rho '{s}'"));
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let mode = match s.trim().split_once(':') {
            Some(("ar", v)) => RhoMode::Ar(parse(v)?),
            Some(("constant", v)) => RhoMode::Constant(parse(v)?),
            Some(_) => return Err(bad()),
            None if s.trim() == "ar" => RhoMode::Ar(0.8),
            None => RhoMode::Constant(parse(s)?),
        };
        let r = match mode {
            RhoMode::Constant(r) | RhoMode::Ar(r) => r,
        };
        // equicorrelation is positive definite for r in (-1/4, 1)
        if !(r > -0.25 && r < 1.0) {
            return Err(bad());
        }
        Ok(mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    Homoscedastic,
    Heteroscedastic,
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorMode::Homoscedastic => "homoscedastic",
            ErrorMode::Heteroscedastic => "heteroscedastic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMode {
    /// Deletion probabilities driven by the error term.
    Scenario1,
    /// Deletion probabilities driven by X1 and X3.
    Scenario2,
    None,
}

impl fmt::Display for MissingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissingMode::Scenario1 => "scenario1",
            MissingMode::Scenario2 => "scenario2",
            MissingMode::None => "none",
        })
    }
}

/// Deletion-probability parameters `(a, b, c, d, e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl MrParams {
    pub const SCENARIO1: MrParams = MrParams { a: 0.1, b: 0.5, c: 0.1, d: -1.1, e: 0.3 };
    pub const SCENARIO2: MrParams = MrParams { a: 0.1, b: 0.3, c: 0.1, d: -0.5, e: 0.6 };

    pub fn from_slice(v: &[f64]) -> Result<Self, SimulationError> {
        match *v {
            [a, b, c, d, e] => Ok(Self { a, b, c, d, e }),
            _ => Err(SimulationError::InvalidConfig(format!(
                "mr_params needs 5 values, got {}",
                v.len()
            ))),
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.a, self.b, self.c, self.d, self.e]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Prime,
    PrimeMa,
    Cc,
    MeanImpute,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Prime, Method::PrimeMa, Method::Cc, Method::MeanImpute];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prime => "prime",
            Method::PrimeMa => "prime_ma",
            Method::Cc => "cc",
            Method::MeanImpute => "mean_impute",
        }
    }

    /// Whether the method yields linear coefficient estimates.
    pub fn has_beta(self) -> bool {
        self != Method::PrimeMa
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SimulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| SimulationError::UnknownMethod(s.to_string()))
    }
}

/// Comma separated method list, e.g. `prime,cc`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>, SimulationError> {
    let set: BTreeSet<Method> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err(SimulationError::InvalidConfig("empty method list".into()));
    }
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub n_test: usize,
    pub rho: RhoMode,
    pub error: ErrorMode,
    pub r_squared: f64,
    pub missing: MissingMode,
    pub mr_params: MrParams,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 200,
            n_test: 10_000,
            rho: RhoMode::Constant(0.3),
            error: ErrorMode::Homoscedastic,
            r_squared: 0.7,
            missing: MissingMode::Scenario1,
            mr_params: MrParams::SCENARIO1,
            replications: 100,
            seed: 1,
        }
    }
}

const SCENARIO_KEYS: [&str; 9] = [
    "n",
    "n_test",
    "rho",
    "error",
    "r_squared",
    "missing",
    "mr_params",
    "replications",
    "seed",
];

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: String| Err(SimulationError::InvalidConfig(m));
        if self.n < 50 {
            return bad(format!("n = {} is below 50", self.n));
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        if !(self.r_squared > 0.0 && self.r_squared < 1.0) {
            return bad(format!("r_squared = {} outside (0, 1)", self.r_squared));
        }
        if !(0.0..=1.0).contains(&self.mr_params.e) {
            return bad(format!("e = {} outside [0, 1]", self.mr_params.e));
        }
        let p = self.mr_params;
        if [p.a, p.b, p.c, p.d].iter().any(|v| !v.is_finite()) {
            return bad("mr_params must be finite".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if cholesky(self.rho.covariance().view()).is_none() {
            return bad(format!("rho {} gives a singular covariance", self.rho));
        }
        Ok(())
    }

    /// Parses the key-value scenario format. Keys left out take their
    /// defaults; every unrecognized key is reported.
    pub fn parse(text: &str) -> Result<Self, SimulationError> {
        Self::parse_with_keys(text).map(|(cfg, _)| cfg)
    }

    /// Like [`ScenarioConfig::parse`], also returning the keys the text set.
    pub fn parse_with_keys(text: &str) -> Result<(Self, Vec<String>), SimulationError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SimulationError::Parse(e.to_string()))?;
        let unknown: Vec<String> = table
            .keys()
            .filter(|k| !SCENARIO_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(SimulationError::UnknownKeys(unknown));
        }
        let mut cfg = Self::default();
        let err = |k: &str| SimulationError::Parse(format!("bad value for '{k}'"));
        let uint = |k: &str, v: &toml::Value| {
            v.as_integer()
                .filter(|&i| i >= 0)
                .map(|i| i as u64)
                .ok_or_else(|| err(k))
        };
        let real = |k: &str, v: &toml::Value| {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| err(k))
        };
        for (k, v) in &table {
            match k.as_str() {
                "n" => cfg.n = uint(k, v)? as usize,
                "n_test" => cfg.n_test = uint(k, v)? as usize,
                "replications" => cfg.replications = uint(k, v)? as usize,
                "seed" => cfg.seed = uint(k, v)?,
                "r_squared" => cfg.r_squared = real(k, v)?,
                "rho" => {
                    cfg.rho = match v {
                        toml::Value::String(s) => s.parse()?,
                        other => real(k, other)?.to_string().parse()?,
                    }
                }
                "error" => {
                    cfg.error = v
                        .clone()
                        .try_into()
                        .map_err(|_| err(k))?
                }
                "missing" => {
                    cfg.missing = v
                        .clone()
                        .try_into()
                        .map_err(|_| err(k))?
                }
                "mr_params" => {
                    let vals = v
                        .as_array()
                        .ok_or_else(|| err(k))?
                        .iter()
                        .map(|x| real(k, x))
                        .collect::<Result<Vec<_>, _>>()?;
                    cfg.mr_params = MrParams::from_slice(&vals)?;
                }
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok((cfg, table.keys().cloned().collect()))
    }

    pub fn load(path: &Path) -> Result<Self, SimulationError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        format!(
            "n = {}\nn_test = {}\nrho = \"{}\"\nerror = \"{}\"\nr_squared = {:?}\nmissing = \"{}\"\nmr_params = [{}]\nreplications = {}\nseed = {}\n",
            self.n,
            self.n_test,
            self.rho,
            self.error,
            self.r_squared,
            self.missing,
            self.mr_params
                .to_vec()
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(", "),
            self.replications,
            self.seed
        )
    }
}

/// `n x 8` covariates: three independent U[0,1] columns, then five
/// correlated N(1, Σ) columns.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, rho: RhoMode, rng: &mut R) -> Array2<f64> {
    let chol = cholesky(rho.covariance().view()).expect("covariance is positive definite");
    let mut x = Array2::zeros((n, N_COVARIATES));
    let mut z = [0.0; 5];
    for mut row in x.rows_mut() {
        for j in 0..P_NONLINEAR {
            row[j] = rng.random::<f64>();
        }
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..5 {
            row[P_NONLINEAR + i] = 1.0 + (0..=i).map(|k| chol[(i, k)] * z[k]).sum::<f64>();
        }
    }
    x
}

pub fn true_mean(x: ArrayView1<f64>) -> f64 {
    use std::f64::consts::PI;
    (2.0 * PI * x[0]).sin()
        + (PI * x[1]).sin()
        + 0.5 * x[2].powi(3)
        + BETA.iter().enumerate().map(|(k, b)| b * x[P_NONLINEAR + k]).sum::<f64>()
}

pub fn true_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.outer_iter().map(true_mean).collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Noise variance giving `Var(μ) / (Var(μ) + σ²) = r_squared`.
pub fn sigma_for_r2(mu_samples: &[f64], r_squared: f64) -> Result<f64, SimulationError> {
    if mu_samples.len() < 2 {
        return Err(SimulationError::DegenerateMu);
    }
    let var = sample_variance(mu_samples);
    if !(var > 0.0) {
        return Err(SimulationError::DegenerateMu);
    }
    Ok(var * (1.0 - r_squared) / r_squared)
}

/// Population constants estimated once per correlation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub var_mu: f64,
    /// `E Σ_j X_j²`, the heteroscedastic normalizer.
    pub mean_sq_norm: f64,
}

pub fn calibrate(rho: RhoMode, draws: usize) -> Calibration {
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let x = gen_covariates(draws, rho, &mut rng);
    let mu = true_means(x.view());
    let mean_sq_norm = x.outer_iter().map(|r| r.dot(&r)).sum::<f64>() / draws as f64;
    Calibration {
        var_mu: sample_variance(mu.as_slice().expect("contiguous")),
        mean_sq_norm,
    }
}

pub fn gen_errors<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    sigma2: f64,
    mode: ErrorMode,
    mean_sq_norm: f64,
    rng: &mut R,
) -> Array1<f64> {
    x.outer_iter()
        .map(|row| {
            let var = match mode {
                ErrorMode::Homoscedastic => sigma2,
                ErrorMode::Heteroscedastic => sigma2 * row.dot(&row) / mean_sq_norm,
            };
            let z: f64 = rng.sample(StandardNormal);
            var.sqrt() * z
        })
        .collect()
}

pub fn logistic_deletion(a: f64, b: f64, s: f64) -> f64 {
    1.0 / (1.0 + (a * s + b).exp())
}

pub fn probit_deletion(c: f64, d: f64, s: f64) -> f64 {
    Normal::standard().cdf(c * s + d)
}

/// Per-unit deletion probabilities of groups 2-4.
pub fn deletion_probabilities(
    mode: MissingMode,
    x: ArrayView1<f64>,
    eps: f64,
    p: &MrParams,
) -> [f64; 3] {
    match mode {
        MissingMode::Scenario1 => [
            logistic_deletion(p.a, p.b, eps),
            probit_deletion(p.c, p.d, eps),
            p.e,
        ],
        MissingMode::Scenario2 => [
            logistic_deletion(p.a, p.b, x[0]),
            probit_deletion(p.c, p.d, x[2]),
            p.e,
        ],
        MissingMode::None => [0.0; 3],
    }
}

fn apply_groups<R: Rng + ?Sized>(
    n: usize,
    probs: impl Fn(usize) -> [f64; 3],
    rng: &mut R,
) -> Array2<bool> {
    let mut mask = Array2::from_elem((n, N_COVARIATES), true);
    for i in 0..n {
        let p = probs(i);
        for (g, &pg) in p.iter().enumerate() {
            if rng.random::<f64>() < pg {
                for &c in &GROUPS[g + 1] {
                    mask[(i, c)] = false;
                }
            }
        }
    }
    mask
}

/// Observation mask with error-driven group deletion.
pub fn apply_missing_scenario1<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    eps: ArrayView1<f64>,
    params: &MrParams,
    rng: &mut R,
) -> Array2<bool> {
    apply_groups(
        x.nrows(),
        |i| deletion_probabilities(MissingMode::Scenario1, x.row(i), eps[i], params),
        rng,
    )
}

/// Observation mask with covariate-driven group deletion. Group 3 uses the
/// generated X3 even when group 2 deletes it.
pub fn apply_missing_scenario2<R: Rng + ?Sized>(
    x: ArrayView2<f64>,
    params: &MrParams,
    rng: &mut R,
) -> Array2<bool> {
    apply_groups(
        x.nrows(),
        |i| deletion_probabilities(MissingMode::Scenario2, x.row(i), 0.0, params),
        rng,
    )
}

pub fn incomplete_fraction(mask: &Array2<bool>) -> f64 {
    let rows = mask.outer_iter().filter(|r| r.iter().any(|&o| !o)).count();
    rows as f64 / mask.nrows() as f64
}

/// One generated training set.
#[derive(Debug, Clone)]
pub struct TrainingDraw {
    pub x: Array2<f64>,
    pub mu: Array1<f64>,
    pub eps: Array1<f64>,
    pub mask: Array2<bool>,
}

impl TrainingDraw {
    pub fn y(&self) -> Array1<f64> {
        &self.mu + &self.eps
    }

    pub fn table(&self) -> ObservationTable {
        let structure = ModelStructure::leading(P_NONLINEAR, N_COVARIATES - P_NONLINEAR)
            .expect("fixed structure");
        ObservationTable::new(self.y(), self.x.clone(), self.mask.clone(), structure)
            .expect("generated data is finite")
            .with_names("y", (1..=N_COVARIATES).map(|j| format!("X{j}")).collect())
            .expect("eight names")
    }
}

pub fn draw_training<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    sigma2: f64,
    calibration: &Calibration,
    rng: &mut R,
) -> TrainingDraw {
    let x = gen_covariates(config.n, config.rho, rng);
    let mu = true_means(x.view());
    let eps = gen_errors(x.view(), sigma2, config.error, calibration.mean_sq_norm, rng);
    let mask = match config.missing {
        MissingMode::Scenario1 => apply_missing_scenario1(x.view(), eps.view(), &config.mr_params, rng),
        MissingMode::Scenario2 => apply_missing_scenario2(x.view(), &config.mr_params, rng),
        MissingMode::None => Array2::from_elem(x.dim(), true),
    };
    TrainingDraw { x, mu, eps, mask }
}

/// Result of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    pub incomplete_fraction: f64,
    pub pe: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub pe: f64,
    /// Standard deviation of the per-replication PE.
    pub pe_sd: f64,
    pub mse: Option<f64>,
    pub variance: Option<f64>,
    pub bias_sq: Option<f64>,
    pub pe_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ScenarioConfig,
    pub sigma2: f64,
    pub calibration: Calibration,
    pub mean_incomplete_fraction: f64,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl MetricsReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// PE and β̂ of one method fitted to one training draw.
pub fn evaluate_method(
    method: Method,
    table: &ObservationTable,
    test_x: ArrayView2<f64>,
    test_mu: ArrayView1<f64>,
    options: &FitOptions,
) -> Result<(f64, Option<Vec<f64>>), String> {
    let (pred, beta) = match method {
        Method::PrimeMa => {
            let ma = fit_prime_ma(table, options).map_err(|e| e.to_string())?;
            (ma.predict(test_x).map_err(|e| e.to_string())?, None)
        }
        _ => {
            let fit = match method {
                Method::Prime => fit_prime(table, options),
                Method::Cc => fit_cc(table, options),
                _ => fit_mean_impute(table, options),
            }
            .map_err(|e| e.to_string())?;
            let pred = fit.predict(test_x).map_err(|e| e.to_string())?;
            (pred, Some(fit.beta.to_vec()))
        }
    };
    let pe = prediction_error(pred.view(), test_mu);
    if !pe.is_finite() {
        return Err("non-finite prediction".into());
    }
    Ok((pe, beta))
}

pub fn prediction_error(pred: ArrayView1<f64>, mu: ArrayView1<f64>) -> f64 {
    pred.iter().zip(mu).map(|(p, m)| (p - m).powi(2)).sum::<f64>() / mu.len() as f64
}

/// MSE, variance and squared bias of coefficient estimates around `truth`.
pub fn mse_decomposition(betas: &[Vec<f64>], truth: &[f64]) -> (f64, f64, f64) {
    let n = betas.len() as f64;
    let k = truth.len();
    let mean: Vec<f64> = (0..k).map(|j| betas.iter().map(|b| b[j]).sum::<f64>() / n).collect();
    let mse = betas
        .iter()
        .map(|b| b.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let variance = betas
        .iter()
        .map(|b| b.iter().zip(&mean).map(|(e, m)| (e - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let bias_sq = mean.iter().zip(truth).map(|(m, t)| (m - t).powi(2)).sum();
    (mse, variance, bias_sq)
}

fn summarize(method: Method, records: &[ReplicationRecord]) -> MethodSummary {
    let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method).collect();
    let pes: Vec<f64> = mine.iter().filter_map(|r| r.pe).collect();
    let n_ok = pes.len();
    let pe = if n_ok > 0 { pes.iter().sum::<f64>() / n_ok as f64 } else { f64::NAN };
    let pe_sd = if n_ok > 1 { sample_variance(&pes).sqrt() } else { f64::NAN };
    let betas: Vec<Vec<f64>> = mine.iter().filter_map(|r| r.beta.clone()).collect();
    let (mse, variance, bias_sq) = if method.has_beta() && !betas.is_empty() {
        let (m, v, b) = mse_decomposition(&betas, &BETA);
        (Some(m), Some(v), Some(b))
    } else {
        (None, None, None)
    };
    MethodSummary {
        method,
        n_ok,
        n_failed: mine.len() - n_ok,
        pe,
        pe_sd,
        mse,
        variance,
        bias_sq,
        pe_ratio: None,
    }
}

/// Runs `config.replications` independent replications of every method.
///
/// Replication `l` draws from its own ChaCha stream `l + 1` of the master
/// seed; stream 0 produces the shared test set. Results do not depend on
/// thread scheduling.
pub fn run_study(
    config: &ScenarioConfig,
    methods: &[Method],
    options: &FitOptions,
) -> Result<MetricsReport, SimulationError> {
    config.validate()?;
    let calibration = calibrate(config.rho, CALIBRATION_DRAWS);
    let sigma2 = calibration.var_mu * (1.0 - config.r_squared) / config.r_squared;
    let mut test_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let test_x = gen_covariates(config.n_test, config.rho, &mut test_rng);
    let test_mu = true_means(test_x.view());
    let methods: Vec<Method> = methods.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    let records: Vec<ReplicationRecord> = (0..config.replications)
        .into_par_iter()
        .flat_map_iter(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(l as u64 + 1);
            let draw = draw_training(config, sigma2, &calibration, &mut rng);
            let mut options = options.clone();
            options.kernel.seed = rng.random();
            let frac = incomplete_fraction(&draw.mask);
            let table = draw.table();
            methods
                .iter()
                .map(|&m| match evaluate_method(m, &table, test_x.view(), test_mu.view(), &options) {
                    Ok((pe, beta)) => ReplicationRecord {
                        replication: l,
                        method: m,
                        incomplete_fraction: frac,
                        pe: Some(pe),
                        beta,
                        error: None,
                    },
                    Err(e) => ReplicationRecord {
                        replication: l,
                        method: m,
                        incomplete_fraction: frac,
                        pe: None,
                        beta: None,
                        error: Some(e),
                    },
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut summaries: Vec<MethodSummary> = methods.iter().map(|&m| summarize(m, &records)).collect();
    if let Some(base) = summaries.iter().find(|s| s.method == Method::Prime).map(|s| s.pe) {
        for s in &mut summaries {
            s.pe_ratio = Some(if s.method == Method::Prime { 1.0 } else { s.pe / base });
        }
    }
    let fracs: Vec<f64> = records
        .iter()
        .filter(|r| r.method == methods[0])
        .map(|r| r.incomplete_fraction)
        .collect();
    Ok(MetricsReport {
        config: config.clone(),
        sigma2,
        calibration,
        mean_incomplete_fraction: fracs.iter().sum::<f64>() / fracs.len() as f64,
        methods: summaries,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub r_squared: f64,
    pub method: Method,
    pub ratio: f64,
}

/// PE of every method divided by PRIME's PE, one block per report.
pub fn pe_ratio(reports: &[MetricsReport]) -> Result<Vec<RatioRow>, SimulationError> {
    let mut out = Vec::new();
    for r in reports {
        let base = r.method(Method::Prime).ok_or(SimulationError::MissingBaseline)?.pe;
        for s in &r.methods {
            out.push(RatioRow {
                r_squared: r.config.r_squared,
                method: s.method,
                ratio: if s.method == Method::Prime { 1.0 } else { s.pe / base },
            });
        }
    }
    Ok(out)
}

/// Runs the same study over several R² values.
pub fn run_r2_grid(
    config: &ScenarioConfig,
    methods: &[Method],
    options: &FitOptions,
    grid: &[f64],
) -> Result<Vec<MetricsReport>, SimulationError> {
    grid.iter()
        .map(|&r2| {
            let cfg = ScenarioConfig { r_squared: r2, ..config.clone() };
            run_study(&cfg, methods, options)
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "n",
    "n_test",
    "rho",
    "error",
    "missing",
    "r_squared",
    "replications",
    "seed",
    "method",
    "metric",
    "value",
    "sd",
    "failed",
];

fn opt(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

/// One row per (method, metric): `pe` (with its SD), `mse`, `variance`,
/// `bias_sq` and `pe_ratio`.
pub fn write_summary_csv<W: Write>(report: &MetricsReport, writer: W) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    let c = &report.config;
    let setting = [
        c.n.to_string(),
        c.n_test.to_string(),
        c.rho.to_string(),
        c.error.to_string(),
        c.missing.to_string(),
        format_real(c.r_squared),
        c.replications.to_string(),
        c.seed.to_string(),
    ];
    for s in &report.methods {
        let rows = [
            ("pe", Some(s.pe), Some(s.pe_sd)),
            ("mse", s.mse, None),
            ("variance", s.variance, None),
            ("bias_sq", s.bias_sq, None),
            ("pe_ratio", s.pe_ratio, None),
        ];
        for (metric, value, sd) in rows {
            let mut rec: Vec<String> = setting.to_vec();
            rec.extend([
                s.method.to_string(),
                metric.to_string(),
                opt(value),
                opt(sd),
                s.n_failed.to_string(),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-replication records in long format.
pub fn write_long_csv<W: Write>(report: &MetricsReport, writer: W) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "replication".to_string(),
        "method".to_string(),
        "incomplete_fraction".to_string(),
        "pe".to_string(),
    ];
    header.extend((P_NONLINEAR + 1..=N_COVARIATES).map(|j| format!("beta_X{j}")));
    header.push("error".to_string());
    w.write_record(&header)?;
    for r in &report.records {
        let mut rec = vec![
            r.replication.to_string(),
            r.method.to_string(),
            format_real(r.incomplete_fraction),
            opt(r.pe),
        ];
        match &r.beta {
            Some(b) => rec.extend(b.iter().map(|v| format_real(*v))),
            None => rec.extend(std::iter::repeat_n(String::new(), BETA.len())),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed line of a summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// The setting columns, in header order up to `seed`.
    pub setting: Vec<String>,
    pub method: String,
    pub metric: String,
    pub value: Option<f64>,
    pub sd: Option<f64>,
    pub failed: usize,
}

impl SummaryRow {
    fn field(&self, name: &str) -> &str {
        let k = SUMMARY_HEADER.iter().position(|h| *h == name).expect("setting column");
        &self.setting[k]
    }
}

pub fn read_summary_csv<R: std::io::Read>(reader: R) -> Result<Vec<SummaryRow>, SimulationError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SUMMARY_HEADER {
        return Err(SimulationError::SchemaMismatch(format!(
            "expected columns {}, found {}",
            SUMMARY_HEADER.join(","),
            header.join(",")
        )));
    }
    let num = |s: &str, line: usize| -> Result<Option<f64>, SimulationError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| SimulationError::SchemaMismatch(format!("line {line}: bad number '{s}'")))
    };
    rdr.records()
        .enumerate()
        .map(|(r, rec)| {
            let rec = rec?;
            let line = r + 2;
            let get = |k: usize| rec.get(k).unwrap_or("").to_string();
            Ok(SummaryRow {
                setting: (0..8).map(get).collect(),
                method: get(8),
                metric: get(9),
                value: num(&get(10), line)?,
                sd: num(&get(11), line)?,
                failed: get(12).parse().map_err(|_| {
                    SimulationError::SchemaMismatch(format!("line {line}: bad failure count"))
                })?,
            })
        })
        .collect()
}

fn settings_in_order(rows: &[SummaryRow]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for r in rows {
        if !out.contains(&r.setting) {
            out.push(r.setting.clone());
        }
    }
    out
}

fn methods_in_order(rows: &[SummaryRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

/// Table with one line per setting and `PE (SD)` per method; the smallest
/// PE of each line is bold.
pub fn render_markdown(rows: &[SummaryRow]) -> String {
    let methods = methods_in_order(rows);
    let mut out = String::from("| missing | n | rho | error | R² |");
    for m in &methods {
        out.push_str(&format!(" {m} |"));
    }
    out.push_str("\n|---|---|---|---|---|");
    out.push_str(&"---|".repeat(methods.len()));
    out.push('\n');
    for setting in settings_in_order(rows) {
        let pe = |m: &String| {
            rows.iter()
                .find(|r| r.setting == setting && &r.method == m && r.metric == "pe")
        };
        let best = methods
            .iter()
            .filter_map(|m| pe(m).and_then(|r| r.value))
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        let first = rows.iter().find(|r| r.setting == setting).expect("setting has rows");
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |",
            first.field("missing"),
            first.field("n"),
            first.field("rho"),
            first.field("error"),
            first.field("r_squared")
        ));
        for m in &methods {
            let cell = match pe(m).and_then(|r| r.value.map(|v| (v, r.sd))) {
                Some((v, sd)) if v.is_finite() => {
                    let val = if v == best { format!("**{v:.3}**") } else { format!("{v:.3}") };
                    match sd.filter(|s| s.is_finite()) {
                        Some(s) => format!("{val} ({s:.3})"),
                        None => val,
                    }
                }
                _ => "n/a".to_string(),
            };
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    out
}

/// Long-format PE ratios against PRIME, one line per (setting, method).
pub fn write_ratio_long_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "n", "rho", "error", "missing", "r_squared", "ratio"])?;
    for setting in settings_in_order(rows) {
        let pe_of = |m: &str| {
            rows.iter()
                .find(|r| r.setting == setting && r.method == m && r.metric == "pe")
                .and_then(|r| r.value)
        };
        let base = pe_of(Method::Prime.name());
        for m in methods_in_order(rows) {
            let stored = rows
                .iter()
                .find(|r| r.setting == setting && r.method == m && r.metric == "pe_ratio")
                .and_then(|r| r.value);
            let ratio = stored.or_else(|| Some(pe_of(&m)? / base?));
            if let Some(ratio) = ratio {
                let first = rows.iter().find(|r| r.setting == setting).expect("setting has rows");
                w.write_record([
                    m.as_str(),
                    first.field("n"),
                    first.field("rho"),
                    first.field("error"),
                    first.field("missing"),
                    first.field("r_squared"),
                    &format_real(ratio),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mean_function() {
        let x = array![0.25, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_abs_diff_eq!(true_mean(x.view()), 2.2, epsilon = 1e-12);
        assert_eq!(true_mean(Array1::zeros(8).view()), 0.0);
        let mut shifted = x.clone();
        shifted[3] += 1.0;
        assert_abs_diff_eq!(true_mean(shifted.view()) - true_mean(x.view()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn covariate_moments() {
        let x = gen_covariates(100_000, RhoMode::Ar(0.8), &mut rng(1));
        for j in 0..3 {
            assert!(x.column(j).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for j in 3..8 {
            assert_abs_diff_eq!(x.column(j).mean().unwrap(), 1.0, epsilon = 0.02);
        }
        let a = x.column(3).to_vec();
        let b = x.column(5).to_vec();
        let (ma, mb) = (a.iter().sum::<f64>() / 1e5, b.iter().sum::<f64>() / 1e5);
        let cov = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / 1e5;
        let corr = cov / (sample_variance(&a) * sample_variance(&b)).sqrt();
        assert_abs_diff_eq!(corr, 0.64, epsilon = 0.02);
    }

    #[test]
    fn sigma_examples() {
        let unit = [-1.0, 1.0, -1.0, 1.0];
        let v = sample_variance(&unit);
        assert_abs_diff_eq!(sigma_for_r2(&unit, 0.5).unwrap(), v, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma_for_r2(&unit, 0.9).unwrap(), v / 9.0, epsilon = 1e-15);
        assert!(sigma_for_r2(&unit, 1.0 - 1e-12).unwrap() < 1e-11);
        assert!(matches!(sigma_for_r2(&[1.0, 1.0], 0.5), Err(SimulationError::DegenerateMu)));
    }

    #[test]
    fn error_variances() {
        let x = gen_covariates(1_000_000, RhoMode::Constant(0.3), &mut rng(2));
        let e = gen_errors(x.view(), 2.0, ErrorMode::Homoscedastic, 1.0, &mut rng(3));
        assert_abs_diff_eq!(sample_variance(e.as_slice().unwrap()), 2.0, epsilon = 0.02);
        let cal = calibrate(RhoMode::Constant(0.3), CALIBRATION_DRAWS);
        let h = gen_errors(x.view(), 2.0, ErrorMode::Heteroscedastic, cal.mean_sq_norm, &mut rng(4));
        assert_abs_diff_eq!(sample_variance(h.as_slice().unwrap()), 2.0, epsilon = 0.02);
        let z = gen_errors(x.view(), 0.0, ErrorMode::Homoscedastic, 1.0, &mut rng(5));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn calibration_magnitudes() {
        let cal = calibrate(RhoMode::Constant(0.3), CALIBRATION_DRAWS);
        // E Σ X² = 3 * 1/3 + 5 * (1 + 1)
        assert_abs_diff_eq!(cal.mean_sq_norm, 11.0, epsilon = 0.05);
        assert!(cal.var_mu > 4.0 && cal.var_mu < 5.5, "{}", cal.var_mu);
    }

    #[test]
    fn deletion_probability_examples() {
        let zero = MrParams { a: 0.0, b: 0.0, c: 0.0, d: 0.0, e: 0.0 };
        let x = Array1::from_elem(8, 0.7);
        assert_eq!(deletion_probabilities(MissingMode::Scenario1, x.view(), 3.0, &zero), [0.5, 0.5, 0.0]);
        assert_eq!(deletion_probabilities(MissingMode::Scenario2, x.view(), 0.0, &zero), [0.5, 0.5, 0.0]);
        let x = gen_covariates(2000, RhoMode::Constant(0.3), &mut rng(6));
        let m = apply_missing_scenario2(x.view(), &zero, &mut rng(7));
        assert!(m.column(6).iter().all(|&o| o) && m.column(0).iter().all(|&o| o));
        // blocks are deleted together
        for r in m.outer_iter() {
            for g in GROUPS {
                assert_eq!(r[g[0]], r[g[1]]);
            }
        }
    }

    #[test]
    fn scenario_file_round_trip() {
        let cfg = ScenarioConfig {
            rho: RhoMode::Ar(0.8),
            error: ErrorMode::Heteroscedastic,
            missing: MissingMode::Scenario2,
            mr_params: MrParams::SCENARIO2,
            ..Default::default()
        };
        assert_eq!(ScenarioConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let partial = ScenarioConfig::parse("n = 400\nrho = 0.6\n").unwrap();
        assert_eq!(partial.n, 400);
        assert_eq!(partial.rho, RhoMode::Constant(0.6));
        match ScenarioConfig::parse("n = 100\nfoo = 1\nbar = 2\n") {
            Err(SimulationError::UnknownKeys(k)) => assert_eq!(k, vec!["bar", "foo"]),
            other => panic!("{other:?}"),
        }
        assert!(ScenarioConfig::parse("n = 10").is_err());
        assert!(ScenarioConfig::parse("r_squared = 1.0").is_err());
        assert!(ScenarioConfig::parse("mr_params = [1, 2]").is_err());
        assert!(ScenarioConfig::parse("missing = \"scenario3\"").is_err());
    }

    #[test]
    fn method_lists() {
        assert_eq!(parse_methods("cc,prime").unwrap(), vec![Method::Prime, Method::Cc]);
        assert_eq!(parse_methods("prime-ma").unwrap(), vec![Method::PrimeMa]);
        assert!(parse_methods("prime,ilse").is_err());
        assert!(parse_methods("").is_err());
    }

    #[test]
    fn mse_identity_and_oracle_pe() {
        let betas = vec![vec![1.1, -1.4, 0.9, -1.2, 0.5], vec![0.8, -1.6, 1.2, -1.0, 0.3]];
        let (mse, var, bias) = mse_decomposition(&betas, &BETA);
        assert_abs_diff_eq!(mse, var + bias, epsilon = 1e-12);
        let mu = array![1.0, 2.0, 3.0];
        assert_eq!(prediction_error(mu.view(), mu.view()), 0.0);
    }

    fn small(missing: MissingMode, reps: usize) -> ScenarioConfig {
        ScenarioConfig {
            n: 100,
            n_test: 500,
            missing,
            replications: reps,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn study_is_reproducible() {
        let cfg = small(MissingMode::Scenario1, 3);
        let a = run_study(&cfg, &Method::ALL, &FitOptions::default()).unwrap();
        let b = run_study(&cfg, &Method::ALL, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 12);
        let prime = a.method(Method::Prime).unwrap();
        assert_eq!(prime.pe_ratio, Some(1.0));
        assert!(a.method(Method::PrimeMa).unwrap().mse.is_none());
        for s in &a.methods {
            if let (Some(m), Some(v), Some(b)) = (s.mse, s.variance, s.bias_sq) {
                assert!((m - (v + b)).abs() < 1e-10);
            }
        }
        let mut out = Vec::new();
        write_summary_csv(&a, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 5);
        let mut long = Vec::new();
        write_long_csv(&a, &mut long).unwrap();
        assert_eq!(String::from_utf8(long).unwrap().lines().count(), 13);
    }

    #[test]
    fn replications_share_nothing_but_the_seed() {
        // with the same stream index two studies agree replication by replication
        let one = run_study(&small(MissingMode::None, 1), &[Method::Cc], &FitOptions::default()).unwrap();
        let two = run_study(&small(MissingMode::None, 2), &[Method::Cc], &FitOptions::default()).unwrap();
        assert_eq!(one.records[0], two.records[0]);
        assert_ne!(two.records[0].pe, two.records[1].pe);
    }

    #[test]
    fn ratio_table() {
        let cfg = small(MissingMode::None, 2);
        let reports = run_r2_grid(&cfg, &[Method::Prime, Method::Cc], &FitOptions::default(), &[0.3, 0.7]).unwrap();
        let rows = pe_ratio(&reports).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().filter(|r| r.method == Method::Prime).all(|r| r.ratio == 1.0));
        let cc_only = run_study(&cfg, &[Method::Cc], &FitOptions::default()).unwrap();
        assert!(matches!(pe_ratio(&[cc_only]), Err(SimulationError::MissingBaseline)));
    }

    #[test]
    fn summary_round_trip_and_markdown() {
        let r = run_study(&small(MissingMode::None, 2), &[Method::Prime, Method::Cc], &FitOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&r, &mut buf).unwrap();
        let rows = read_summary_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 10);
        let md = render_markdown(&rows);
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("**"));
        let mut long = Vec::new();
        write_ratio_long_csv(&rows, &mut long).unwrap();
        let text = String::from_utf8(long).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("prime,") && text.lines().nth(1).unwrap().ends_with(",1.0"));
        // a second setting adds a line
        let other = run_study(&ScenarioConfig { r_squared: 0.5, ..small(MissingMode::None, 2) }, &[Method::Prime, Method::Cc], &FitOptions::default()).unwrap();
        let mut buf2 = Vec::new();
        write_summary_csv(&other, &mut buf2).unwrap();
        let mut all = rows.clone();
        all.extend(read_summary_csv(buf2.as_slice()).unwrap());
        assert_eq!(render_markdown(&all).lines().count(), 4);
        assert!(matches!(read_summary_csv("a,b\n1,2\n".as_bytes()), Err(SimulationError::SchemaMismatch(_))));
    }

    #[test]
    fn failures_are_counted() {
        // CC cannot fit when nearly every row is incomplete
        let cfg = ScenarioConfig {
            n: 50,
            n_test: 100,
            missing: MissingMode::Scenario1,
            mr_params: MrParams { a: 0.0, b: -5.0, c: 0.0, d: 0.0, e: 0.9 },
            replications: 2,
            ..Default::default()
        };
        let r = run_study(&cfg, &[Method::Prime, Method::Cc], &FitOptions::default()).unwrap();
        let cc = r.method(Method::Cc).unwrap();
        assert_eq!(cc.n_failed, 2);
        assert!(r.records.iter().filter(|x| x.method == Method::Cc).all(|x| x.error.is_some()));
    }
}

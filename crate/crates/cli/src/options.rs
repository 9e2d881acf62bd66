use std::path::{Path, PathBuf};

use clap::Args;
use prime_core::dataset::LoadOptions;
use prime_core::fit::FitOptions;
use prime_core::kernel::{BandwidthRule, DirectionDist, KernelConfig, Projection};
use prime_core::spline::{KnotPlacement, SplineConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Model and ingestion settings shared by `fit` and `average`. Any of them
/// may also come from a `--config` TOML file; flags win.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Spline degree.
    #[arg(long)]
    pub degree: Option<usize>,
    /// Number of interior knots.
    #[arg(long)]
    pub knots: Option<usize>,
    /// Interior knot placement: uniform or quantile.
    #[arg(long)]
    pub placement: Option<String>,
    /// `silverman`, or `fixed:h` / `fixed:h1,h2,...` (one per covariate).
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// `none`, or `B:normal` / `B:uniform` random directions.
    #[arg(long)]
    pub projection: Option<String>,
    /// Project when a unit observes more than this many covariates.
    #[arg(long)]
    pub projection_threshold: Option<usize>,
    /// Seed for every random choice; drawn from entropy when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Token marking a missing cell (empty cells are always missing).
    #[arg(long)]
    pub missing_token: Option<String>,
    /// Skip rows whose response is missing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_missing_response: Option<bool>,
    /// TOML file with any of the settings above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    /// Fills unset flags from the config file, if any.
    pub fn merged(&self) -> Result<Self, CliError> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = read_input(path)?;
        let file: ModelArgs =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(Self {
            degree: self.degree.or(file.degree),
            knots: self.knots.or(file.knots),
            placement: self.placement.clone().or(file.placement),
            bandwidth: self.bandwidth.clone().or(file.bandwidth),
            projection: self.projection.clone().or(file.projection),
            projection_threshold: self.projection_threshold.or(file.projection_threshold),
            seed: self.seed.or(file.seed),
            missing_token: self.missing_token.clone().or(file.missing_token),
            drop_missing_response: self.drop_missing_response.or(file.drop_missing_response),
            config: self.config.clone(),
        })
    }
}

/// Everything a model command needs once flags, file and defaults are
/// combined.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub fit: FitOptions,
    pub missing_token: String,
    pub drop_missing_response: bool,
    pub seed: u64,
}

impl Resolved {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            missing_token: self.missing_token.clone(),
            drop_missing_response: self.drop_missing_response,
        }
    }
}

pub fn resolve(args: &ModelArgs) -> Result<Resolved, CliError> {
    let args = args.merged()?;
    let spline_default = SplineConfig::default();
    let placement = match args.placement.as_deref() {
        None => spline_default.placement,
        Some("uniform") => KnotPlacement::Uniform,
        Some("quantile") => KnotPlacement::Quantile,
        Some(other) => return Err(CliError::Usage(format!("unknown knot placement '{other}'"))),
    };
    let spline = SplineConfig {
        degree: args.degree.unwrap_or(spline_default.degree),
        interior_knots: args.knots.unwrap_or(spline_default.interior_knots),
        placement,
    };
    let seed = args.seed.unwrap_or_else(|| {
        let s = entropy_seed();
        eprintln!("no --seed given; using seed {s}");
        s
    });
    let kernel_default = KernelConfig::default();
    let kernel = KernelConfig {
        bandwidth: match args.bandwidth.as_deref() {
            None => kernel_default.bandwidth,
            Some(s) => parse_bandwidth(s)?,
        },
        projection: match args.projection.as_deref() {
            None => kernel_default.projection,
            Some(s) => parse_projection(s)?,
        },
        projection_threshold: args
            .projection_threshold
            .unwrap_or(kernel_default.projection_threshold),
        seed,
    };
    kernel.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Resolved {
        fit: FitOptions { spline, kernel },
        missing_token: args
            .missing_token
            .unwrap_or_else(|| LoadOptions::default().missing_token),
        drop_missing_response: args.drop_missing_response.unwrap_or(false),
        seed,
    })
}

pub fn parse_bandwidth(s: &str) -> Result<BandwidthRule, CliError> {
    if s == "silverman" {
        return Ok(BandwidthRule::Silverman);
    }
    let bad = || CliError::Usage(format!("bad --bandwidth '{s}', expected silverman or fixed:h[,h...]"));
    let values = s.strip_prefix("fixed:").ok_or_else(bad)?;
    let h = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BandwidthRule::Fixed(h))
}

pub fn parse_projection(s: &str) -> Result<Projection, CliError> {
    if s == "none" {
        return Ok(Projection::None);
    }
    let bad = || CliError::Usage(format!("bad --projection '{s}', expected none or B:normal|uniform"));
    let (b, dist) = s.split_once(':').unwrap_or((s, "normal"));
    let directions = b.trim().parse::<usize>().map_err(|_| bad())?;
    let dist = match dist.trim() {
        "normal" => DirectionDist::StandardNormal,
        "uniform" => DirectionDist::ScaledUniform,
        _ => return Err(bad()),
    };
    Ok(Projection::Resampled { directions, dist })
}

pub fn entropy_seed() -> u64 {
    use std::collections::hash_map::RandomState;
    use std::hash::{BuildHasher, Hasher};
    let mut h = RandomState::new().build_hasher();
    if let Ok(t) = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH) {
        h.write_u128(t.as_nanos());
    }
    h.write_u32(std::process::id());
    h.finish()
}

/// Reads a file the user named; a missing file is a usage error.
pub fn read_input(path: &Path) -> Result<String, CliError> {
    require_file(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

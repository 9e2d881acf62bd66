use prime_core::averaging::AveragingError;
use prime_core::dataset::DatasetError;
use prime_core::fit::FitError;
use prime_core::simulation::SimulationError;
use prime_core::spline::SplineError;

/// Failure classes with fixed process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing input files (exit 2).
    Usage(String),
    /// Unreadable or inconsistent data (exit 3).
    Data(String),
    /// The numerics could not produce an answer (exit 4).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidStructure(_) | DatasetError::InvalidStructureFile(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Dataset(d) => d.into(),
            FitError::IncompleteRow { row, column } => CliError::Data(format!(
                "prediction row {} has a missing or non-finite value in column {}",
                row + 1,
                column + 1
            )),
            FitError::Spline(SplineError::InvalidDegree(_)) | FitError::Kernel(_) | FitError::UnknownColumn(_) => {
                CliError::Usage(e.to_string())
            }
            FitError::Spline(_) | FitError::Underdetermined { .. } | FitError::InsufficientCompleteCases { .. } => {
                CliError::Numerical(e.to_string())
            }
            FitError::DimensionMismatch(_) | FitError::FitFile(_) | FitError::Io(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<AveragingError> for CliError {
    fn from(e: AveragingError) -> Self {
        match e {
            AveragingError::Fit(f) => f.into(),
            AveragingError::TooFewColumns(_) | AveragingError::LengthMismatch { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::UnknownKeys(_)
            | SimulationError::InvalidConfig(_)
            | SimulationError::Parse(_)
            | SimulationError::UnknownMethod(_) => CliError::Usage(e.to_string()),
            SimulationError::DegenerateMu => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

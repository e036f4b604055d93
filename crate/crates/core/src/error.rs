use crate::model::{Model, Stratum};
use thiserror::Error;

/// Errors raised by the estimation and I/O layers.
///
/// Trial numbers carried in variants are 1-based, matching the external
/// numbering used in count files and reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter domain violation: {0}")]
    ParameterDomain(String),

    #[error("empty arm: no observations for z={z} in trial {trial}")]
    EmptyArm { z: usize, trial: usize },

    #[error("empty cell: no observations for z={z}, s={s} in trial {trial}")]
    EmptyCell { z: usize, s: usize, trial: usize },

    #[error("count outside the support O(z={z}, s={s}) for stratum {stratum} in trial {trial}")]
    Support {
        z: usize,
        s: usize,
        stratum: Stratum,
        trial: usize,
    },

    #[error("mixture component with zero weight is undefined")]
    UndefinedComponent,

    #[error("ratio degeneracy between trials {r1} and {r2}: condition ({condition}) fails")]
    RatioDegeneracy { r1: usize, r2: usize, condition: char },

    #[error("{model} model is untestable with {n_trials} trials: {df} degrees of freedom")]
    UntestableModel {
        model: Model,
        n_trials: usize,
        df: i64,
    },

    #[error("no posterior draws available")]
    EmptyDraws,

    #[error("stratum {0} is absent from the monotone model")]
    AbsentStratum(Stratum),

    #[error("counts must be whole numbers for this operation (found {0})")]
    NonIntegralCounts(f64),

    #[error("trial {trial} is out of range (1..={n_trials})")]
    TrialOutOfRange { trial: usize, n_trials: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trial ids are not contiguous; missing: {missing:?}")]
    NonContiguousTrials { missing: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Machine-readable code used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ParameterDomain(_) => "parameter_domain",
            Error::EmptyArm { .. } => "empty_arm",
            Error::EmptyCell { .. } => "empty_cell",
            Error::Support { .. } => "support",
            Error::UndefinedComponent => "undefined_component",
            Error::RatioDegeneracy { .. } => "ratio_degeneracy",
            Error::UntestableModel { .. } => "untestable_model",
            Error::EmptyDraws => "empty_draws",
            Error::AbsentStratum(_) => "absent_stratum",
            Error::NonIntegralCounts(_) => "non_integral_counts",
            Error::TrialOutOfRange { .. } => "trial_out_of_range",
            Error::Precondition(_) => "precondition",
            Error::Parse { .. } => "parse",
            Error::NonContiguousTrials { .. } => "non_contiguous_trials",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 2 for input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::RatioDegeneracy { .. } | Error::UndefinedComponent => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

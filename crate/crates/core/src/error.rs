use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode surfaced by the library.
///
/// Variants are grouped loosely by the layer that raises them; the CLI maps
/// them onto exit codes through [`Error::kind`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // input validation
    #[error("column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("invalid active set: {0}")]
    InvalidActiveSet(String),
    #[error("invalid sign pattern: {0}")]
    InvalidSignPattern(String),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),

    // solvers
    #[error("numerical breakdown in QP solver: {0}")]
    NumericalBreakdown(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("active set of size {s} exceeds the enumeration cap of {max}; use the branch-and-bound solver (phi-miqp)")]
    ActiveSetTooLarge { s: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // analytic / statistics
    #[error("invalid s = {s} for p = {p}: {reason}")]
    InvalidS { s: usize, p: usize, reason: String },
    #[error("delta must lie in (0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("lasso did not converge in {iterations} sweeps (max change {max_change:e})")]
    NoConvergence { iterations: usize, max_change: f64 },
    #[error("fold {fold} has {size} observations, need at least 2")]
    DegenerateFold { fold: usize, size: usize },
    #[error("residual degrees of freedom exhausted: n = {n}, s_cv = {s_cv}")]
    DegreesOfFreedomExhausted { n: usize, s_cv: usize },
    #[error("response carries no signal (all correlations with predictors are zero)")]
    EmptySignal,
    #[error("noise variance estimate is zero; the penalty level would vanish")]
    ZeroNoiseEstimate,
    #[error("prefix of {n} rows is too small (need n >= 2 and n >= s + 1 = {min})")]
    PrefixTooSmall { n: usize, min: usize },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Solver,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NumericalBreakdown(_) | Error::SolverFailure(_) | Error::NoConvergence { .. } => {
                ErrorKind::Solver
            }
            _ => ErrorKind::Input,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

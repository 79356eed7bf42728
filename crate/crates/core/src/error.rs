use thiserror::Error;

/// Errors raised by the simulation core.
///
/// `is_numerical` separates failures of the numerics (a kernel that is not
/// positive semidefinite, an ensemble whose weights collapsed) from bad input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("white-noise kernel has no pointwise value; use the discrete covariance path")]
    UnsupportedPointwiseEval,
    #[error("lag {lag} is outside the tabulated range [0, {max}]")]
    OutOfRange { lag: f64, max: f64 },
    #[error("invalid interval: t = {t} precedes t0 = {t0}")]
    InvalidInterval { t: f64, t0: f64 },
    #[error("covariance is not positive semidefinite (failed with jitter {jitter:e})")]
    KernelNotPSD { jitter: f64 },
    #[error("state vector has zero norm")]
    ZeroNorm,
    #[error("no basis state carries eigenvalue {value} of operator {operator}")]
    EmptyEigenmanifold { operator: usize, value: f64 },
    #[error("preferred-basis operators do not commute with H0 (max commutator {norm:e})")]
    NonCommuting { norm: f64 },
    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),
    #[error("too many undecided trajectories: decided fraction {decided:.4} < {required}")]
    TooManyUndecided { decided: f64, required: f64 },
    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),
    #[error("integrator rejected step: trace drift {drift:e} at t = {t}")]
    StepRejected { t: f64, drift: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::KernelNotPSD { .. }
                | Error::ZeroNorm
                | Error::DegenerateEnsemble(_)
                | Error::TooManyUndecided { .. }
                | Error::StepRejected { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

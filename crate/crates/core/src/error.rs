use nalgebra::DVector;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not positive definite")]
    NotPositiveDefinite,

    #[error("zero direction")]
    ZeroDirection,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The solver ran out of iterations. Carries the best iterate seen.
    #[error("not converged after {iterations} iterations (kkt violation {violation:e})")]
    NotConverged { beta: DVector<f64>, violation: f64, iterations: usize },

    #[error("degenerate active set: {0}")]
    DegenerateActiveSet(String),

    #[error("degenerate correction: df = {df} is too close to n = {n}")]
    DegenerateCorrection { df: f64, n: usize },

    #[error("theta required: no ground truth and no theta supplied")]
    ThetaRequired,

    #[error("invalid variance: {0}")]
    InvalidVariance(f64),

    #[error("nonsmooth point: {0}")]
    NonsmoothPoint(String),

    #[error("nonsmooth evaluation: divergence is not finite")]
    NonsmoothEvaluation,

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("experiment failed: {failed} of {total} replications failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("config error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) get their own CLI exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::NotConverged { .. }
                | Error::DegenerateActiveSet(_)
                | Error::DegenerateCorrection { .. }
                | Error::InvalidVariance(_)
                | Error::NonsmoothPoint(_)
                | Error::NonsmoothEvaluation
                | Error::Degenerate(_)
                | Error::TooManyFailures { .. }
        )
    }
}

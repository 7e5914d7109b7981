//! Crate-wide error type.

use std::fmt;

/// Errors produced by the design pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Empty signal where at least one sample is required.
    EmptySignal,
    /// A signal contains NaN or infinite samples.
    NonFiniteSignal,
    /// Two signals that must have equal length do not.
    LengthMismatch { left: usize, right: usize },
    /// Two datasets that must share the same input sequence do not.
    InputMismatch { max_abs_diff: f64 },
    /// Denominator polynomial is identically zero.
    ZeroDenominator,
    /// A transfer function required to be stable is not.
    Unstable,
    /// The reference model equals the unit gain and cannot be inverted for design.
    UnitReferenceModel,
    /// The reference model has zeros on or outside the unit circle; its inverse is unstable.
    NonMinimumPhase,
    /// The reference model numerator is identically zero.
    ZeroReferenceModel,
    /// The closed loop has an unsolvable algebraic loop (1 + direct feedthrough ~ 0).
    IllPosedLoop,
    /// Input signal has (numerically) zero variance; the prefilter is undefined.
    ZeroVarianceInput,
    /// The correlation window is too long for the record: requires T > 2*lag.
    WindowTooLong { len: usize, lag: usize },
    /// |Phi_u(omega)| fell below threshold at a grid frequency: input not
    /// persistently exciting there.
    NotExciting { omega: f64 },
    /// Regressor Gram matrix is rank deficient.
    RankDeficient { detail: String },
    /// Stability constraint infeasible at the requested level; the estimated
    /// minimal feasible level is attached.
    InfeasibleDelta { requested: f64, min_feasible: f64 },
    /// Interior-point solver failed to converge within the iteration budget.
    SolverFailure { detail: String },
    /// Meta-dataset became empty after screening.
    EmptyMetaDataset,
    /// Invalid configuration or argument value.
    InvalidArgument { detail: String },
    /// File or serialization problem.
    Io { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptySignal => write!(f, "signal is empty"),
            Error::NonFiniteSignal => write!(f, "signal contains non-finite samples"),
            Error::LengthMismatch { left, right } => {
                write!(f, "signal length mismatch: {left} vs {right}")
            }
            Error::InputMismatch { max_abs_diff } => {
                write!(f, "datasets do not share the same input (max |du| = {max_abs_diff:.3e})")
            }
            Error::ZeroDenominator => write!(f, "denominator polynomial is zero"),
            Error::Unstable => write!(f, "transfer function is unstable"),
            Error::UnitReferenceModel => {
                write!(f, "reference model equals unit gain; matching objective degenerates")
            }
            Error::NonMinimumPhase => {
                write!(f, "reference model is non-minimum-phase; causal inversion impossible")
            }
            Error::ZeroReferenceModel => write!(f, "reference model numerator is zero"),
            Error::IllPosedLoop => write!(f, "algebraic loop is ill-posed (1 + CG feedthrough ~ 0)"),
            Error::ZeroVarianceInput => write!(f, "input signal has zero variance"),
            Error::WindowTooLong { len, lag } => {
                write!(f, "record length {len} too short for correlation lag {lag} (need T > 2*lag)")
            }
            Error::NotExciting { omega } => {
                write!(f, "input spectrum vanishes at omega = {omega:.6} rad/sample")
            }
            Error::RankDeficient { detail } => write!(f, "rank-deficient regressor: {detail}"),
            Error::InfeasibleDelta { requested, min_feasible } => write!(
                f,
                "stability constraint infeasible at delta = {requested}; \
                 smallest feasible level is about {min_feasible:.4} (try a larger delta)"
            ),
            Error::SolverFailure { detail } => write!(f, "solver failed: {detail}"),
            Error::EmptyMetaDataset => write!(f, "empty meta-dataset after screening"),
            Error::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
            Error::Io { detail } => write!(f, "i/o error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { detail: e.to_string() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io { detail: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.
//!
//! Every fallible operation returns a structured variant rather than a
//! string so callers (and the CLI exit-code mapping) can branch on the
//! failure class.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// List lengths disagree with the declared dimension.
    DimensionMismatch { expected: usize, got: usize, what: &'static str },
    /// Non-positive length or too few cells along an axis.
    InvalidExtent { axis: usize, detail: String },
    /// Fractional-power norm hit a negative value below the clamp threshold.
    NegativeBase { value: f64, p: f64 },
    /// Density field carries a negative value below the clamp threshold.
    NonPhysicalDensity { min: f64 },
    /// Velocity failed the discrete divergence-free check.
    NotDivergenceFree { max_div: f64, tol: f64 },
    /// Pure-Neumann/periodic Poisson right-hand side has a nonzero mean.
    IncompatibleRHS { mean: f64, tol: f64 },
    /// Iterative solver exhausted its iteration budget.
    NoConvergence { iterations: usize, residual: f64, target: f64 },
    /// The CFL formula demands a step below `dt_min`.
    StalledStep { required_dt: f64, dt_min: f64 },
    /// A density/signal value fell below the hard clamp threshold.
    PositivityViolation { field: &'static str, min: f64 },
    /// The cell density exceeded the configured ceiling.
    BlowUpSuspected { max_n: f64, ceiling: f64 },
    /// A field contains NaN or infinity.
    NonFinite { context: &'static str },
    /// Diagnostics series is empty.
    EmptySeries,
    /// Test function violates its wall-compatibility requirement.
    IncompatibleTestFunction { detail: String },
    /// Config text could not be parsed.
    Parse { line: usize, col: usize, reason: String },
    /// Config value violates a constraint.
    Validation { key: String, constraint: String },
    /// Config contains a key that is not part of the schema.
    UnknownKey { key: String, line: usize },
    /// Snapshot file failed its structural checks.
    CorruptSnapshot { reason: String },
    /// Underlying I/O failure.
    IoFailure(std::io::Error),
    /// Error raised inside a time-stepping loop, annotated with position.
    Step { step: u64, time: f64, source: Box<Error> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got, what } => {
                write!(f, "dimension mismatch: {what} has {got} entries, expected {expected}")
            }
            Error::InvalidExtent { axis, detail } => {
                write!(f, "invalid extent on axis {axis}: {detail}")
            }
            Error::NegativeBase { value, p } => {
                write!(f, "negative base {value:e} for fractional exponent p = {p}")
            }
            Error::NonPhysicalDensity { min } => {
                write!(f, "non-physical density: minimum value {min:e}")
            }
            Error::NotDivergenceFree { max_div, tol } => {
                write!(f, "velocity not divergence-free: max |div u| = {max_div:e} (tol {tol:e})")
            }
            Error::IncompatibleRHS { mean, tol } => {
                write!(f, "incompatible rhs: mean {mean:e} exceeds tolerance {tol:e}")
            }
            Error::NoConvergence { iterations, residual, target } => {
                write!(
                    f,
                    "no convergence after {iterations} iterations: residual {residual:e}, target {target:e}"
                )
            }
            Error::StalledStep { required_dt, dt_min } => {
                write!(f, "stalled step: CFL demands dt = {required_dt:e} < dt_min = {dt_min:e}")
            }
            Error::PositivityViolation { field, min } => {
                write!(f, "positivity violation in {field}: min value {min:e}")
            }
            Error::BlowUpSuspected { max_n, ceiling } => {
                write!(f, "blow-up suspected: max n = {max_n:e} exceeds ceiling {ceiling:e}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::EmptySeries => write!(f, "diagnostics series is empty"),
            Error::IncompatibleTestFunction { detail } => {
                write!(f, "incompatible test function: {detail}")
            }
            Error::Parse { line, col, reason } => {
                write!(f, "parse error at line {line}, column {col}: {reason}")
            }
            Error::Validation { key, constraint } => {
                write!(f, "validation error for `{key}`: {constraint}")
            }
            Error::UnknownKey { key, line } => {
                write!(f, "unknown key `{key}` at line {line}")
            }
            Error::CorruptSnapshot { reason } => write!(f, "corrupt snapshot: {reason}"),
            Error::IoFailure(e) => write!(f, "i/o failure: {e}"),
            Error::Step { step, time, source } => {
                write!(f, "at step {step}, t = {time:.6}: {source}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::IoFailure(e) => Some(e),
            Error::Step { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoFailure(e)
    }
}

impl Error {
    /// Exit-code class used by the CLI: 1 for validation-type failures,
    /// 2 for runtime PDE failures.
    pub fn exit_class(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::UnknownKey { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidExtent { .. }
            | Error::CorruptSnapshot { .. }
            | Error::IoFailure(_)
            | Error::EmptySeries
            | Error::IncompatibleTestFunction { .. } => 1,
            Error::Step { source, .. } => source.exit_class(),
            _ => 2,
        }
    }
}

use thiserror::Error;

/// Errors shared across the samplers, solvers, and the simulation harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid truncation region: lower {lower} must lie strictly below upper {upper}")]
    InvalidRegion { lower: f64, upper: f64 },

    #[error("truncation region carries no numerically representable mass{}", match .coordinate {
        Some(j) => format!(" (coordinate {j})"),
        None => String::new(),
    })]
    DegenerateMass { coordinate: Option<usize> },

    #[error("invalid parameter {name}={value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("covariance matrix is numerically singular (condition estimate {cond:.3e})")]
    SingularCovariance { cond: f64 },

    #[error("initial state violates truncation region at coordinate {coordinate}")]
    InvalidInit { coordinate: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("selection is empty: no coordinate crossed its threshold")]
    NoSelection,

    #[error("observation {value} was not selected at threshold {threshold}")]
    NotSelected { value: f64, threshold: f64 },

    #[error("root bracket [{lo}, {hi}] does not contain a sign change")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("{got} samples are too few for the requested level (need at least {needed})")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("coordinate descent did not converge within {sweeps} sweeps")]
    NonConvergence { sweeps: usize },

    #[error("residual variance undefined: {selected} selected columns with only {n} observations")]
    SaturatedModel { n: usize, selected: usize },

    #[error("cannot split {n} observations into {folds} non-empty folds")]
    EmptyFold { n: usize, folds: usize },

    #[error("selected design columns are rank deficient: {detail}")]
    RankDeficient { detail: String },

    #[error("replicate {rep_id} failed: {source}")]
    Replicate {
        rep_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("output failure: {0}")]
    Io(String),

    #[error("table output failure: {0}")]
    Csv(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

use crate::trilateration::LocalizationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Invariant { field: String, reason: String },

    #[error("unknown node id `{0}`")]
    UnknownId(String),

    #[error("no line-of-sight between `{0}` and `{1}`")]
    MissingLos(String, String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("requested {requested} components but only {found} are resolvable")]
    Unresolvable { requested: usize, found: usize },

    #[error("covariance is rank deficient: signal eigenvalue {eigenvalue:e} below tolerance")]
    RankDeficient { eigenvalue: f64 },

    #[error("anchors are collinear; the fix is ambiguous up to a mirror image")]
    CollinearAnchors { candidates: Box<[LocalizationResult; 2]> },

    #[error("solver did not converge after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("system is underdetermined: {equations} equations for {unknowns} unknowns")]
    Underdetermined { equations: usize, unknowns: usize },

    #[error("hypothesis space of {count} exceeds enumeration cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("ill-conditioned reflection schedule (condition number {0:e})")]
    IllConditioned(f64),

    #[error("inconsistent measurement: {0}")]
    Inconsistent(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

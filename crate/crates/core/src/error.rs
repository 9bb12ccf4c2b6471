use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("unknown column {0:?}")]
    UnknownColumn(String),

    #[error("invalid treatment value {value:?} in row {row}")]
    InvalidTreatment { row: usize, value: String },

    #[error("propensity {value} in row {row} is outside ({lo}, {hi})")]
    InvalidPropensity { row: usize, value: f64, lo: f64, hi: f64 },

    #[error("missing value in column {column:?}, row {row}")]
    MissingValue { column: String, row: usize },

    #[error("column {0:?} has zero variance")]
    ZeroVariance(String),

    #[error("only one treatment arm is present")]
    OneArmed,

    #[error("empty subgroup {0}")]
    EmptySubgroup(usize),

    #[error("no feasible tree: {0}")]
    Infeasible(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Copy of the error as a plain message.
    pub(crate) fn clone_message(&self) -> Self {
        Error::InvalidArgument(self.to_string())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

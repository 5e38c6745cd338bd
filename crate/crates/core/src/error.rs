use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid region code {code:?} for level {level}")]
    InvalidRegion { code: String, level: String },

    #[error("levels {from} and {to} are not comparable")]
    IncomparableLevels { from: String, to: String },

    #[error("{to} is not coarser than {from}")]
    NotCoarser { from: String, to: String },

    #[error("invalid value {value} for {key}: {reason}")]
    InvalidValue { key: String, value: f64, reason: String },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("zero distribution for coarse cell {cell}")]
    ZeroDistribution { cell: String },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}

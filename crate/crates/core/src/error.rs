use thiserror::Error;

/// Errors raised by the samplers, the benchmark harness and the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cholesky decomposition failed for {0}")]
    Decomposition(String),

    #[error("invalid degrees of freedom {df} for dimension {dim}")]
    DegreesOfFreedom { df: f64, dim: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("leaf {leaf} violates tree invariant: {reason}")]
    TreeInvariant { leaf: usize, reason: String },

    #[error("outcome is not standardized (mean {mean:.4}, sd {sd:.4})")]
    NotStandardized { mean: f64, sd: f64 },

    #[error("overlap violation: treatment column has a single class")]
    Overlap,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("outcome component {0} is constant")]
    DegenerateOutcome(usize),

    #[error("insufficient sample: {got} draws, at least {need} required")]
    InsufficientSample { got: usize, need: usize },

    #[error("nonpositive weight {value} at row {row}")]
    Weight { row: usize, value: f64 },

    #[error("cannot pool chains: {0}")]
    Pooling(String),

    #[error("unknown column '{0}'")]
    Column(String),

    #[error("parse error at row {row}, column '{column}': {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("malformed tree record: {0}")]
    TreeFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

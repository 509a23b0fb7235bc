use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid Cholesky factor: {0}")]
    InvalidFactor(String),

    #[error("raw network output has length {actual}, expected {expected} for n = {n}")]
    RawLength {
        n: usize,
        expected: usize,
        actual: usize,
    },

    #[error("{0}")]
    Domain(String),

    #[error("trajectory parse error in {source_id} at row {row}: {message}")]
    Parse {
        source_id: String,
        row: usize,
        message: String,
    },

    #[error("non-uniform time grid at row {row}")]
    NonUniformGrid { row: usize },

    #[error("trajectory has {0} samples, at least 3 are required")]
    TooFewSamples(usize),

    #[error("dataset is missing state derivatives")]
    MissingDerivatives,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("safety function gradient undefined at obstacle {index} center")]
    SingularGradient { index: usize },

    #[error("safety constraints are infeasible (active set {active:?})")]
    Infeasible { active: Vec<usize> },

    #[error("decay rate λ = {lambda} must exceed α = {alpha}")]
    DecayRateBelowAlpha { lambda: f64, alpha: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

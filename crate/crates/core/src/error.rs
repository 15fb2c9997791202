//! Error types shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, inconsistent shapes,
    /// out-of-range hyperparameters, insufficient data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary input file failed to parse.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Cosine similarity against an all-zero vector.
    #[error("degenerate vector: cosine similarity undefined for zero norm")]
    DegenerateVector,

    /// Interpolation coefficients violate the subspace constraints.
    #[error("invalid interpolation coefficients: {0}")]
    InvalidCoefficients(String),

    /// A loss evaluation produced a non-finite value.
    #[error("non-finite loss")]
    NonFiniteLoss,

    /// Training diverged; carries the epoch (and end-point, when training
    /// a subspace) where the non-finite loss appeared.
    #[error("training diverged at epoch {epoch}{}", fmt_endpoint(endpoint))]
    Divergence { epoch: usize, endpoint: Option<usize> },

    /// A metric was requested over an empty evaluation set.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-supplied configuration or files.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Format { .. } | Error::InvalidCoefficients(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

fn fmt_endpoint(endpoint: &Option<usize>) -> String {
    match endpoint {
        Some(i) => format!(" in end-point {i}"),
        None => String::new(),
    }
}

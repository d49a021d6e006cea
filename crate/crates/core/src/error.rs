use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("expression of {len} tokens exceeds the maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frozen-parameter contract violated: tensor `{tensor}` changed")]
    FrozenViolation { tensor: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (sample ids {ids:?}); dump written to {dump:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<u64>,
        dump: Option<PathBuf>,
    },

    #[error("malformed parameter container: {0}")]
    Container(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),

    #[error("metric invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Parameter(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

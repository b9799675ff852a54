use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A parameter update or loss became NaN or infinite.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("layer index {index} out of range for a model with {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid IDX data: {0}")]
    Idx(String),

    #[error("invalid model file: {0}")]
    ModelFormat(String),

    #[error("invalid architecture `{text}`: {reason}")]
    Architecture { text: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    /// Every paired difference is zero, so the signed-rank test has nothing to rank.
    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("trial seed {0} has no partner in the other sample")]
    UnpairedSeed(u64),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad NIfTI magic or header: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated NIfTI data: need {needed} bytes, file has {actual}")]
    TruncatedData { needed: usize, actual: usize },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("volume too small: {0}")]
    VolumeTooSmall(String),
    #[error("crop center lies outside the volume")]
    CenterOutsideVolume,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("at least {needed} distinct patients required, found {found}")]
    TooFewPatients { needed: usize, found: usize },
    #[error("AUROC undefined: scores contain a single class")]
    SingleClass,
    #[error("empty input")]
    EmptyInput,
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("clean subset is empty after quality filtering")]
    EmptyCleanSubset,

    #[error("bad cohort spec: {0}")]
    BadSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

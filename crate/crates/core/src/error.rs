use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EarlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EarlError {
    #[error("dataset not found: {0}")]
    MissingDataset(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: u64, reason: String },

    /// The requested position has no complete line after it; the caller
    /// should draw another position.
    #[error("no following line after byte {0}")]
    NoFollowingLine(u64),

    /// The sampler could not reach enough distinct records.
    #[error("sample exhausts dataset: wanted {wanted}, reached {reached}")]
    SampleExhausted { wanted: usize, reached: usize },

    /// The input stream has fewer records than requested; run on all data.
    #[error("stream of {available} records is shorter than target {wanted}; use full-data mode")]
    FullDataMode { wanted: usize, available: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("zero-mean replicate distribution (sd = {std_dev}); c_v undefined")]
    ZeroMean { std_dev: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("job error: {0}")]
    Job(String),

    #[error("no surviving workers")]
    NoSurvivors,

    #[error("bad spill file: {0}")]
    BadSpill(String),
}

impl EarlError {
    pub fn job(msg: impl Into<String>) -> Self {
        EarlError::Job(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        EarlError::InvalidArgument(msg.into())
    }
}

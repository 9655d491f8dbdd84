use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid token stream: {0}")]
    InvalidStream(String),

    #[error("statistic undefined: {0}")]
    UndefinedStatistic(&'static str),

    #[error("vocabulary of {size} tokens exceeds the quantizer limit of {limit}")]
    VocabularyTooLarge { size: usize, limit: usize },

    #[error("invalid pmf: {0}")]
    InvalidPmf(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("predictor mismatch: {0}")]
    PredictorMismatch(String),

    #[error("bridge failure: {0}")]
    Bridge(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptStream(msg.into())
    }

    pub(crate) fn bridge(msg: impl Into<String>) -> Self {
        Error::Bridge(msg.into())
    }
}

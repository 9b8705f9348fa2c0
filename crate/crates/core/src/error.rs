use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("timestep {timestep} outside 1..={episode_length}")]
    TimestepOutOfRange { timestep: u32, episode_length: u32 },
    #[error("episode of length {episode_length} already finished")]
    EpisodeFinished { episode_length: u32 },
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite parameter at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected {expected} parameters, found {found}")]
    Length { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("buffer holds {size} transitions, need {required} to sample")]
    NotEnoughSamples { size: usize, required: usize },
    #[error("invalid replay configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("metrics sink failed after {bins_written} bins: {source}")]
    Sink {
        bins_written: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io { path: path.into(), source }
    }
}

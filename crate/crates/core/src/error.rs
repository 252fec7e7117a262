use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("scene spec invalid: {0}")]
    SpecValidation(String),

    #[error("track is empty")]
    EmptyTrack,

    #[error("track has {0} points, need at least 2")]
    TrackTooShort(usize),

    #[error("window has {got} frames, need {need}")]
    WindowTooShort { got: usize, need: usize },

    #[error("objective diverged at step {step}: {value}")]
    DivergenceDetected { step: usize, value: f64 },

    #[error("ray offset pushes point {index} behind its camera center")]
    DegenerateRay { index: usize },

    #[error("no valid pixels to evaluate")]
    EmptyValidSet,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::DimensionMismatch(_)
                | Error::Validation(_)
                | Error::SpecValidation(_)
                | Error::WindowTooShort { .. }
                | Error::TrackTooShort(_)
                | Error::EmptyTrack
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

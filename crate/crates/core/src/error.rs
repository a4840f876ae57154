use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("volume shape {shape:?} has an odd dimension; pad to even extents before the DWT")]
    PaddingRequired { shape: [usize; 3] },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("request error: {0}")]
    Request(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot normalize row {row}: zero norm")]
    Normalization { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("format error in {file} at {offset}: {msg}")]
    Format {
        file: String,
        offset: String,
        msg: String,
    },
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(file: &str, offset: impl ToString, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.to_string(),
            offset: offset.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

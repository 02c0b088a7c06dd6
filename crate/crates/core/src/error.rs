use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
///
/// The variants map one-to-one onto the CLI exit-code classes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error in `{field}` at byte {offset}: {message}")]
    Format {
        field: &'static str,
        offset: usize,
        message: String,
    },
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn format(field: &'static str, offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            field,
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } => 3,
            Error::Io { .. } => 4,
            Error::State(_) => 5,
            Error::Dimension(_) => 6,
            Error::Domain(_) => 7,
        }
    }
}

use std::path::PathBuf;

/// Everything that can go wrong while driving the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but is not what its magic or layout claims.
    #[error("bad artifact {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// An upstream artifact has not been produced yet.
    #[error("missing artifact {path}: {hint}")]
    Missing { path: PathBuf, hint: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] vitmerge::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Error {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &std::path::Path, detail: impl Into<String>) -> Error {
        Error::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    pub(crate) fn missing(path: &std::path::Path, hint: impl Into<String>) -> Error {
        Error::Missing { path: path.to_path_buf(), hint: hint.into() }
    }
}

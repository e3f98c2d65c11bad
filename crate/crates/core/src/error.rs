use std::path::PathBuf;

/// Errors produced anywhere in the preference-optimization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented domain (token out of range, empty list, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration; `field` is the dotted path of the offending key.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A configuration error located in a file.
    #[error("{path}:{line}: configuration error at `{field}`: {message}")]
    ConfigFile {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("degenerate preference pair: both responses are identical")]
    DegeneratePair,

    #[error("generation failure: {0}")]
    GenerationFailure(String),

    /// Non-finite values reached the optimizer.
    #[error("training aborted: {0}")]
    NonFinite(String),

    #[error("incomparable records: {0}")]
    Incomparable(String),

    #[error("no runs: {0}")]
    NoRuns(String),

    #[error("{path}:{line}: corrupt record: {message}")]
    CorruptRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage ran before the stage that produces its input.
    #[error("missing {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    /// Another process holds the output directory.
    #[error("output directory is locked by another run (remove {0} if that run is gone)")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dimension mismatch for id {id:?}: expected {expected}, found {found}")]
    DimensionMismatch {
        id: Option<u64>,
        expected: usize,
        found: usize,
    },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("non-finite component in vector for id {0}")]
    NonFinite(u64),

    #[error("embedding store is not bound to dataset: {0}")]
    Binding(String),

    #[error("id {0} missing from embedding store")]
    MissingId(u64),

    #[error("training failed: {0}")]
    Training(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("no verbalizer found in completion {raw:?}")]
    Decode { raw: String },

    #[error("prompt of {chars} chars exceeds cap of {cap}")]
    PromptTooLong { chars: usize, cap: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// True for errors caused by bad input (configs, files, arguments) rather
    /// than by something failing while the pipeline ran.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidSpec(_)
            | Error::EmptyDataset
            | Error::DimensionMismatch { .. }
            | Error::DuplicateId(_)
            | Error::NonFinite(_)
            | Error::Binding(_)
            | Error::MissingId(_)
            | Error::Config(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

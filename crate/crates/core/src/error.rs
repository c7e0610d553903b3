use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty sequence: no events for user")]
    EmptySequence,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("gradient requested before a forward pass was recorded")]
    NoForwardPass,

    #[error("feature schema validation failed: {0}")]
    SchemaInvalid(String),

    #[error("unknown feature schema `{0}`")]
    UnknownSchema(String),

    #[error("unknown version {version} of feature schema `{name}`")]
    UnknownVersion { name: String, version: u32 },

    #[error("record is missing required field `{0}`")]
    MissingField(String),

    #[error("field `{field}` has type {found}, expected {expected}")]
    TypeMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("catalog exhausted: requested {requested} items, only {available} eligible")]
    CatalogExhausted { requested: usize, available: usize },

    #[error("late data for an already flushed window: {0}")]
    LateData(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) => 2,
            Error::NonFinite(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

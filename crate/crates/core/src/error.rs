use thiserror::Error;

/// Errors surfaced by the tensor core, model code, and corpus/graph I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: left shape {left:?}, right shape {right:?}")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {what} = {index}, limit {limit}")]
    IndexOutOfRange {
        what: String,
        index: usize,
        limit: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary shortfall: requested {requested} node phrases, found {found}")]
    VocabularyShortfall { requested: usize, found: usize },

    #[error("corpus parse error at {path}:{line}: {message}")]
    CorpusParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("schema error: missing or invalid field `{0}`")]
    Schema(String),

    #[error("checkpoint load error: missing parameters: {0:?}")]
    MissingParameters(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

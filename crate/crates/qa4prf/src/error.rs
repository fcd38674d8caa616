use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid encoding at byte offset {offset} in {source_name}")]
    Encoding { source_name: String, offset: usize },

    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),

    #[error("query `{0}` is empty after preprocessing")]
    EmptyQuery(String),

    #[error("retrieval over an empty corpus")]
    EmptyCorpus,

    #[error("weighted query has no positive mass")]
    EmptyWeightedQuery,

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("position {position} exceeds maximum {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("empty document passed to pointer forward")]
    EmptyDocument,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("query `{0}` absent from judgments")]
    MissingJudgments(String),

    #[error("query sets do not match: {0}")]
    QuerySetMismatch(String),

    #[error("wilcoxon test underpowered: {0} nonzero pairs (need at least 5)")]
    Underpowered(usize),

    #[error("missing required input: {0}")]
    MissingInput(String),

    #[error("{0}")]
    InvalidConfig(String),

    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

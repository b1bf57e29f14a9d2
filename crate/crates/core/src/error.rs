use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("csv header mismatch: {0}")]
    Header(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown column `{column}` in relation `{relation}`")]
    UnknownColumn { relation: String, column: String },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("column kind mismatch: {0}")]
    KindMismatch(String),
    #[error("semiring arity mismatch: {0}")]
    Arity(String),
    #[error("statistic undefined: {0}")]
    Undefined(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("join graph has a cycle: {}", .0.join(" - "))]
    Cycle(Vec<String>),
    #[error("join graph is disconnected: {0:?}")]
    Disconnected(Vec<Vec<String>>),
    #[error("invalid join graph: {0}")]
    Graph(String),
    #[error("cardinality violation on {left} - {right}: {message}")]
    Cardinality {
        left: String,
        right: String,
        message: String,
    },
    #[error("bin overflow on `{feature}`: {count} values exceed {bins} bins")]
    BinOverflow {
        feature: String,
        count: usize,
        bins: usize,
    },
    #[error("duplicate order value in prefix sum input")]
    DuplicateOrderValue,
    #[error("predicate on `{0}` cannot be pushed to the fact table")]
    NotPushable(String),
    #[error("leaf selections overlap on fact row {0}")]
    Overlap(usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("dependency cycle among tasks {0:?}")]
    TaskCycle(Vec<usize>),
    #[error("task {0} references unknown dependency {1}")]
    UnknownTask(usize, usize),
    #[error("task {id} failed: {message}")]
    Task { id: usize, message: String },
    #[error("model format version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("malformed model: {0}")]
    Model(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn unknown_column(relation: &str, column: &str) -> Self {
        Error::UnknownColumn {
            relation: relation.to_string(),
            column: column.to_string(),
        }
    }
}

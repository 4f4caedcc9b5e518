use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate tool_id `{0}`")]
    DuplicateId(String),

    #[error("row {row}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: non-finite value")]
    NonFinite { row: usize },

    #[error("text contains no tokens")]
    ZeroTokens,

    #[error("unknown tool_id `{0}`")]
    UnknownTool(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {term} loss at epoch {epoch} (last good epoch: {last_good:?})")]
    Divergence {
        term: &'static str,
        epoch: usize,
        last_good: Option<usize>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: String, expected: u64 },

    #[error("fingerprint mismatch for {path}: sidecar {expected}, content {actual}")]
    Fingerprint {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("schema violation at `{path}`: {msg}")]
    Schema { path: String, msg: String },

    #[error("code trie corrupted: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
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

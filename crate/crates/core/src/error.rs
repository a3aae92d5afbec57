use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on `{operand}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        operand: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown vocabulary word(s): {}", .0.join(", "))]
    Vocabulary(Vec<String>),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

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
    pub(crate) fn dim(
        op: &'static str,
        operand: &'static str,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Dimension {
            op,
            operand,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

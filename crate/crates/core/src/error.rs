use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// configuration and data problems are contract errors, `Numeric` is a
/// numeric abort.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("layer norm needs at least 2 columns, got {0}")]
    DegenerateRow(usize),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty pool: attention mask has no nonzero entry")]
    EmptyPool,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        best_checkpoint: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("degenerate annotator column {0}: zero variance")]
    DegenerateAnnotator(usize),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in `error[<code>]:` prefixes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidTensor(_) => "tensor",
            Error::DegenerateRow(_) => "degenerate-row",
            Error::Tape(_) => "tape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::EmptyPool => "empty-pool",
            Error::Numeric(_) => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Manifest(_) => "manifest",
            Error::Corruption(_) => "corruption",
            Error::Integrity(_) => "integrity",
            Error::Alignment(_) => "alignment",
            Error::DegenerateAnnotator(_) => "degenerate-annotator",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Diverged { .. })
    }
}

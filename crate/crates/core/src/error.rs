use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MdmError>;

/// Coarse classification used by the CLI to pick an exit code and by the
/// C API to pick a status code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum MdmError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected \"MDMC\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape mismatch in layer `{layer}`: shape implies {expected} elements, found {found}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in layer `{layer}` at element {index}")]
    NonFinite { layer: String, index: usize },

    #[error("integrity hash mismatch: stored {stored:016x}, computed {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("duplicate model id `{0}`")]
    DuplicateId(String),

    #[error("unknown model id `{0}`")]
    UnknownId(String),

    #[error("delta `{0}` carries no scale factors")]
    MissingScaleFactors(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation of task `{task}` failed: {reason}")]
    TaskEvaluation { task: String, reason: String },

    #[error("no archived delta for `{0}`")]
    MissingArchive(String),

    #[error("ledger has no entry: {0}")]
    MissingLedgerEntry(String),

    #[error("ledger line {line} failed its integrity check")]
    LedgerIntegrity { line: usize },

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),
}

impl MdmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MdmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        MdmError::InvalidArgument(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            MdmError::Numerical(_) | MdmError::Degenerate(_) => ErrorClass::Numerical,
            MdmError::TaskEvaluation { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}

pub(crate) fn check_len(left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(MdmError::LengthMismatch { left, right })
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OclError> = std::result::Result<T, E>;

/// Every typed failure the library can surface.
#[derive(Debug, Error)]
pub enum OclError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not positive definite (pivot {pivot} at index {index}); increase damping")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("layer cache missing: {0}")]
    CacheMissing(String),
    #[error("no prototypes to classify against")]
    EmptyPrototypes,

    #[error("optimizer state missing for layer {0}")]
    StateMissing(usize),
    #[error("exact Fisher too large: {params} parameters in layer {layer} (limit {limit})")]
    TooLarge {
        layer: usize,
        params: usize,
        limit: usize,
    },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("label {0} is not among the active classes of this batch")]
    LabelNotInCur(usize),
    #[error("label {0} is neither in the old nor in the new class partition")]
    LabelUnpartitioned(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("truncated or empty file: {0}")]
    TruncatedFile(String),
    #[error("{requested} tasks of {per_task} classes exceed the {available} available classes")]
    TooManyTasks {
        requested: usize,
        per_task: usize,
        available: usize,
    },
    #[error("image geometry unknown for {0} transform")]
    GeometryUnknown(String),
    #[error("unknown kind {0:?}")]
    UnknownKind(String),
    #[error("task spec does not match dataset: {0}")]
    SpecMismatch(String),

    #[error("missing test split for task {0}")]
    MissingSplit(usize),
    #[error("accuracy matrix row {0} is incomplete")]
    IncompleteRow(usize),
    #[error("forgetting needs at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("duplicate sweep cell: {0}")]
    DuplicateCell(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no results to report")]
    EmptyResults,
    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OclError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OclError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        OclError::ShapeMismatch(msg.into())
    }

    /// Process exit code for this error's category.
    ///
    /// 2 config, 3 data/format, 4 numerical, 5 I/O, 6 other.
    pub fn exit_code(&self) -> i32 {
        use OclError::*;
        match self {
            InvalidConfig(_) | DuplicateCell(_) | UnknownKind(_) | TooManyTasks { .. } => 2,
            BadMagic { .. }
            | BadVersion(_)
            | TruncatedFile(_)
            | LabelOutOfRange { .. }
            | SpecMismatch(_)
            | GeometryUnknown(_)
            | MissingSplit(_) => 3,
            NotPositiveDefinite { .. } | NonFinite(_) | NotSquare { .. } | ShapeMismatch(_) => 4,
            Io { .. } => 5,
            _ => 6,
        }
    }
}

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error class; the CLI maps each class to a fixed exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Shape,
    Domain,
    Theorem,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),

    #[error("unsupported header field: {0}")]
    UnsupportedHeader(String),

    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(u64),

    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),

    #[error("csv row {row} has {len} fields, header has {expected}")]
    RaggedRows {
        row: usize,
        len: usize,
        expected: usize,
    },

    #[error("tensor dimensions must be positive, got {rows}x{cols}")]
    EmptyTensor { rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{len} elements cannot be split into blocks of {d}")]
    IndivisibleShape { len: usize, d: usize },

    #[error("{rows}x{cols} does not factor as ({a}*{b})x({c}*{d})")]
    ShapeFactorizationMismatch {
        rows: usize,
        cols: usize,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
    },

    #[error("bit width {0} outside [2, 8]")]
    BitsOutOfRange(u32),

    #[error("value {value} at flat index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f32 },

    #[error("matrix is not positive definite after damping")]
    NotPositiveDefinite,

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("k = {k} exceeds the number of blocks {blocks}")]
    KTooLarge { k: usize, blocks: usize },

    #[error("rank {rank} exceeds min(m, n) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("no configuration of {method} fits a budget of {budget} parameters")]
    BudgetInfeasible { method: &'static str, budget: usize },

    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("theorem check failed: {0}")]
    TheoremViolation(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io(_)
            | MagicMismatch { .. }
            | VersionUnsupported(_)
            | UnsupportedHeader(_)
            | TruncatedPayload { .. }
            | TrailingBytes(_)
            | NonFiniteValue(_)
            | RaggedRows { .. } => ErrorKind::Io,
            EmptyTensor { .. }
            | ShapeMismatch(_)
            | IndivisibleShape { .. }
            | ShapeFactorizationMismatch { .. }
            | ArchitectureMismatch(_) => ErrorKind::Shape,
            BitsOutOfRange(_)
            | OutOfRange { .. }
            | NotPositiveDefinite
            | EmptyCalibration
            | KTooLarge { .. }
            | RankTooLarge { .. }
            | BudgetInfeasible { .. }
            | StepOutOfRange { .. }
            | InvalidConfig(_) => ErrorKind::Domain,
            TheoremViolation(_) => ErrorKind::Theorem,
        }
    }
}

pub(crate) fn shape_mismatch(what: &str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!(
        "{what}: {}x{} vs {}x{}",
        left.0, left.1, right.0, right.1
    ))
}

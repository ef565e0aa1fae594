use thiserror::Error;

/// Crate-wide error type. Per-trace data problems (cycles, duplicate span
/// ids) are *not* errors: the assembler rejects the trace, counts it, and
/// keeps going. Errors here abort the operation that raised them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("state file version {found} unsupported (expected {expected})")]
    StateVersionMismatch { found: u32, expected: u32 },

    #[error("malformed state file: {0}")]
    StateFormat(String),

    #[error("span type {0:?} contains the path separator")]
    IllegalSpanType(String),

    #[error("sketch lengths differ: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    #[error("point dimension {got} does not match sketch length {expected}")]
    DimensionMismatch { got: usize, expected: usize },

    #[error("time reversal: t={t} precedes cluster last_update={last_update}")]
    TimeReversal { t: f64, last_update: f64 },

    #[error("no potential micro-cluster present")]
    NoPmc,

    #[error("alpha must exceed 1 (got {0})")]
    InvalidAlpha(f64),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;

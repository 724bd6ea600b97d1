//! Crate-wide error type.

use std::fmt;
use std::io;

/// Errors surfaced by the engine, caches, model, and harness.
#[derive(Debug)]
pub enum Error {
    /// An input that must be nonempty was empty ("empty logits", "empty prompt", ...).
    EmptyInput(&'static str),
    /// Shape or length mismatch between related tensors.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    /// A query row whose attention mask admits no keys.
    IsolatedQuery { row: usize },
    /// Invalid configuration value.
    InvalidConfig(String),
    /// `append_kv` called with positions that do not continue the cache.
    NonContiguousAppend { expected: usize, actual: usize },
    /// Summary requested for a block with no rows.
    EmptyBlock,
    /// Partial-cache budget cannot even hold the sink and local segments.
    BudgetTooSmall { budget: usize, minimum: usize },
    /// Buffer cannot absorb the tokens of this verification step.
    BufferOverflow {
        occupancy: usize,
        incoming: usize,
        cap: usize,
    },
    /// Refresh requested while the full cache lags the committed sequence.
    CacheLag { cache_len: usize, required: usize },
    /// Eviction point lies inside the committed region.
    EvictBeforeCommit { position: usize, commit: usize },
    /// Token position beyond the supported rotary range.
    PositionOverflow { position: usize, limit: usize },
    /// Malformed tree template (cyclic or forward parent links, bad sentinel).
    Template(String),
    /// Checkpoint encode/decode failure ("bad magic", truncation, unknown tensor).
    Checkpoint(String),
    /// Stochastic verification misuse (e.g. branching template with sampling).
    Sampling(String),
    /// Benchmark orchestration failure.
    Bench(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyInput(what) => write!(f, "{what}"),
            Error::ShapeMismatch {
                context,
                expected,
                actual,
            } => write!(f, "shape mismatch in {context}: expected {expected}, got {actual}"),
            Error::IsolatedQuery { row } => write!(f, "isolated query: row {row} has no unmasked keys"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonContiguousAppend { expected, actual } => write!(
                f,
                "non-contiguous append: cache continues at position {expected}, got {actual}"
            ),
            Error::EmptyBlock => write!(f, "cannot summarize an empty block"),
            Error::BudgetTooSmall { budget, minimum } => write!(
                f,
                "budget {budget} is smaller than the sink+local floor of {minimum} tokens"
            ),
            Error::BufferOverflow {
                occupancy,
                incoming,
                cap,
            } => write!(
                f,
                "buffer overflow: occupancy {occupancy} + incoming {incoming} exceeds cap {cap}"
            ),
            Error::CacheLag {
                cache_len,
                required,
            } => write!(
                f,
                "full cache holds {cache_len} tokens but refresh requires {required}"
            ),
            Error::EvictBeforeCommit { position, commit } => write!(
                f,
                "eviction at position {position} lies before the commit point {commit}"
            ),
            Error::PositionOverflow { position, limit } => {
                write!(f, "position {position} exceeds the rotary limit {limit}")
            }
            Error::Template(msg) => write!(f, "invalid tree template: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Sampling(msg) => write!(f, "sampling error: {msg}"),
            Error::Bench(msg) => write!(f, "bench error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

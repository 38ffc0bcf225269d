//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis disagreement; the message names both shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration invariant does not hold.
    #[error("config error: {0}")]
    Config(String),

    /// A documented call contract was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// More items than the receiving side can hold.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An input exceeds a hard guard on problem size.
    #[error("size error: {0}")]
    Size(String),

    /// An index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An input collection fails a basic precondition (e.g. empty).
    #[error("input error: {0}")]
    Input(String),

    /// A file does not follow its documented layout.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// A checkpoint blob is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

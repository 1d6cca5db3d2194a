//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes. Both shapes are named so the
    /// caller can see which dimension failed to compose.
    #[error("shape mismatch in {op}: ({left_rows}x{left_cols}) vs ({right_rows}x{right_cols})")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// An argument violated a precondition (negative std, rank out of range,
    /// odd column count for a row-balanced mask, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A non-finite value showed up where the numeric contract forbids it.
    /// Carries enough context (layer index, step) to locate the blow-up.
    #[error("non-finite value: {0}")]
    Numeric(String),

    /// An object was used outside its lifecycle, e.g. backward on a tape
    /// that was already consumed.
    #[error("invalid state: {0}")]
    State(String),

    /// A serialized blob failed validation (bad magic, truncated payload,
    /// out-of-range code).
    #[error("format error: {0}")]
    Format(String),

    /// A cross-module consistency check failed (analytic count vs counted
    /// mask entries). Mapped to its own CLI exit code.
    #[error("cross-check failed: {0}")]
    CrossCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps `Config`-like variants to
/// exit code 2 and everything else to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// The CLI maps these onto exit codes, so the grouping matters: anything a
/// user can fix by editing a config or input tensor shape is a "usage" class
/// error, anything about files on disk is an "io" class error.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not. Both shapes are spelled out so the
    /// message is actionable without a debugger.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor fails a structural precondition (rank, axis, extent).
    #[error("{op}: {msg} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("config error: {0}")]
    Config(String),

    /// Malformed values inside otherwise well-formed inputs (labels out of
    /// range, empty datasets, non-finite samples).
    #[error("data error: {0}")]
    Data(String),

    /// An API contract was violated by the caller (for example, asking for
    /// gradients of a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Gradient requested for a node the tape never saw.
    #[error("unknown leaf node {0} (not watched and not used in the forward pass)")]
    UnknownLeaf(u64),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A checkpoint or cached artifact is internally inconsistent.
    #[error("corrupt artifact: {0}")]
    Corruption(String),

    /// The on-disk format is newer or stranger than this build understands.
    #[error("unsupported format: {0}")]
    Version(String),

    /// A probed function produced NaN or infinity.
    #[error("evaluation produced a non-finite value{}", if .0.is_empty() { String::new() } else { format!(": {}", .0) })]
    NonFinite(String),

    /// An invariant check ran to completion and the property does not hold.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Stamps a path onto a bare io error; "No such file or directory" alone
/// is useless once more than one file is in play.
pub fn named_io(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

impl Error {
    /// True for errors the user fixes by changing configuration or inputs,
    /// false for environment and storage problems.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Parse { .. } | Error::Corruption(_) | Error::Version(_)
        )
    }
}

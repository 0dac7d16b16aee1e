use std::path::PathBuf;

/// Errors produced by the toolkit. The CLI maps these onto its exit-code
/// scheme: config/format/contract problems exit 2, numerical aborts exit 3,
/// verification failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("route index {index} out of range for bucket {bucket} with {len} instances")]
    RouteBounds {
        bucket: usize,
        index: usize,
        len: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}: loss_d={loss_d}, loss_g={loss_g}")]
    NonFinite {
        step: usize,
        loss_d: f64,
        loss_g: f64,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

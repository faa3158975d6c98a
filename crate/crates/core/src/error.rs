use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GerspError>;

#[derive(Debug, Error)]
pub enum GerspError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("training diverged at iteration {iteration}: l_ct={l_ct}, l_ce={l_ce}, l_total={l_total}")]
    Diverged {
        iteration: u64,
        l_ct: f64,
        l_ce: f64,
        l_total: f64,
    },
}

impl GerspError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GerspError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code for each failure class, used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            GerspError::Config(_) => "config",
            GerspError::ShapeMismatch { .. } => "shape-mismatch",
            GerspError::MissingTensor(_) => "missing-tensor",
            GerspError::NonFinite(_) => "non-finite",
            GerspError::InvalidInput(_) => "invalid-input",
            GerspError::Io { .. } => "io",
            GerspError::Decode { .. } => "decode",
            GerspError::Dataset(_) => "dataset",
            GerspError::BadMagic => "bad-magic",
            GerspError::VersionMismatch { .. } => "version-mismatch",
            GerspError::ChecksumMismatch { .. } => "checksum-mismatch",
            GerspError::Truncated(_) => "truncated",
            GerspError::Manifest(_) => "manifest",
            GerspError::Diverged { .. } => "diverged",
        }
    }
}

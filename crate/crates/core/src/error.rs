use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the alignment, reprojection and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("failed to write {}: {reason}", path.display())]
    Write { path: PathBuf, reason: String },

    #[error("alignment infeasible: {0}")]
    AlignmentInfeasible(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("training model {model} failed: {source}")]
    Training {
        model: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn write(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Write {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by malformed inputs (bad files, bad parameters).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::BehindCamera { .. } | Error::Load(_)
        )
    }
}

/// Failures while reading a sequence or dataset directory. Every variant names
/// the offending file.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("manifest not found: {}", path.display())]
    MissingManifest { path: PathBuf },

    #[error("malformed manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error(
        "timestamps not strictly increasing in {} at frame {index}: {previous} then {current}",
        path.display()
    )]
    NonMonotoneTimestamps {
        path: PathBuf,
        index: usize,
        previous: u64,
        current: u64,
    },

    #[error(
        "dimension mismatch in {}: expected {}x{}, found {}x{}",
        path.display(), expected.0, expected.1, found.0, found.1
    )]
    DimensionMismatch {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("unreadable image {}: {reason}", path.display())]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("invalid field `{field}` in {}: {reason}", path.display())]
    InvalidField {
        path: PathBuf,
        field: String,
        reason: String,
    },
}

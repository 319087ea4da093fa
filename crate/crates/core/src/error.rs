use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural validation failed for `{array}`: {reason}")]
    Structure { array: String, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("shape error in dimension {dim}: {reason}")]
    Shape { dim: String, reason: String },
    #[error("audit sequence mismatch: expected seq {expected}, got {got}")]
    AuditSequence { expected: u64, got: u64 },
    #[error("reasoner error: {0}")]
    Reasoner(String),
    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("consolidation failed: {0}")]
    Consolidation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] plume_tensor::TensorError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs or configuration rather
    /// than a failure inside the pipeline.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Parameter(_) | Self::Config(_) | Self::Structure { .. } | Self::Shape { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CoreError::io(path, e))
}

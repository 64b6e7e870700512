use std::path::PathBuf;

/// Errors of the I/O and pipeline layer.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] celmseg_core::Error),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            AppError::MissingFile(path)
        } else {
            AppError::Io { path, source }
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AppError::Format { path: path.into(), message: message.into() }
    }

    pub fn json(path: impl Into<PathBuf>, e: serde_json::Error) -> Self {
        AppError::Parse { path: path.into(), line: e.line(), column: e.column(), message: e.to_string() }
    }

    /// Process exit code: 1 usage/configuration, 2 data, 3 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        use celmseg_core::Error as E;
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(E::NonFiniteLoss { .. }) | AppError::Core(E::Numerical(_)) => 3,
            AppError::Core(E::Config(_)) | AppError::Core(E::Usage(_)) | AppError::Core(E::Parameter(_)) => 1,
            _ => 2,
        }
    }
}

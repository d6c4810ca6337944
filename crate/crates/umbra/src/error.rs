use std::path::{Path, PathBuf};

/// Errors of the file-level layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] umbra_core::Error),
    #[error("{0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// 1 for usage or configuration problems, 3 for numeric failures, 2 for
    /// everything data related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Core(umbra_core::Error::NonFinite(_)) => 3,
            Error::Core(umbra_core::Error::InvalidArgument(_)) => 1,
            _ => 2,
        }
    }
}

use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad command-line arguments or references to things that do not exist.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but its contents are unusable.
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("scene {scene}: {source}")]
    Scene { scene: String, source: Box<Error> },
    #[error(transparent)]
    Core(#[from] sparseview_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, message: impl Into<String>) -> Self {
        Error::Data { path: path.to_path_buf(), message: message.into() }
    }

    /// Process exit status: 1 for usage errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Scene { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

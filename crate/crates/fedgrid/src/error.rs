use std::path::PathBuf;

use fedgrid_core::Error as CoreError;

/// Failure classes with fixed process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Other,
    Config,
    Data,
    Divergence,
    Audit,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Other => 1,
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Divergence => 4,
            ErrorClass::Audit => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl AppError {
    pub fn class(&self) -> ErrorClass {
        match self {
            AppError::Config(_) => ErrorClass::Config,
            AppError::Data(_) => ErrorClass::Data,
            AppError::Io { .. } => ErrorClass::Other,
            AppError::Audit(_) => ErrorClass::Audit,
            AppError::Core(e) => match e {
                CoreError::Config(_) | CoreError::KeyTooShort(_) => ErrorClass::Config,
                CoreError::Diverged(_) => ErrorClass::Divergence,
                CoreError::Shape { .. }
                | CoreError::EmptyBatch
                | CoreError::NonFinite
                | CoreError::SeriesTooShort { .. }
                | CoreError::Alignment(_)
                | CoreError::EncodingOverflow { .. }
                | CoreError::UnknownRecord(_)
                | CoreError::InvalidKey(_) => ErrorClass::Data,
                _ => ErrorClass::Other,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

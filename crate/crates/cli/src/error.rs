use hextraj_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("internal: {0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// 1 usage, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Resolution { .. } => 1,
                CoreError::Invariant(_) | CoreError::Shape { .. } | CoreError::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Core(CoreError::io(path, e))
    }
}

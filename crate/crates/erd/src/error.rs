use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ErdError {
    #[error(transparent)]
    Core(#[from] erd_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("snapshot does not match: {0}")]
    SnapshotMismatch(String),
    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Divergence { epoch: usize, iteration: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ErdError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> ErdError {
    let path = path.into();
    move |source| ErdError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, message: impl Into<String>) -> ErdError {
    ErdError::Format { path: path.into(), message: message.into() }
}

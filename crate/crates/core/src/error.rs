use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] sleepgate_tensor::TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("checkpoint {field}: {detail}")]
    Checkpoint { field: String, detail: String },
    #[error("episode file line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("csv line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("training diverged at stage {stage}, epoch {epoch}: {detail} (state saved to {dump:?})")]
    Diverged { stage: u8, epoch: usize, detail: String, dump: Option<PathBuf> },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}

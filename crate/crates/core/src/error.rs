use thiserror::Error;

pub type Result<T> = std::result::Result<T, HtvError>;

#[derive(Debug, Error)]
pub enum HtvError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("window too short: need at least {needed} time steps, got {got}")]
    WindowTooShort { needed: usize, got: usize },

    #[error("hierarchy too deep: input length {input_len} < scale^(layers-1) = {required}")]
    HierarchyTooDeep { input_len: usize, required: usize },

    #[error("nearest interpolation only upsamples: source length {from} > target length {to}")]
    UnsupportedDownsample { from: usize, to: usize },

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("channel error: {0}")]
    Channel(String),

    #[error("window error: {0}")]
    Window(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged: non-finite `{term}` at step {step}")]
    Divergence { term: String, step: usize },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint header error: {0}")]
    CheckpointHeader(String),

    #[error("checkpoint incompatible with config: {}", .0.join("; "))]
    CheckpointIncompatible(Vec<String>),

    #[error("range error: {0}")]
    Range(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HtvError {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        HtvError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

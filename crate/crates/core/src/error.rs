use std::path::PathBuf;

/// Errors produced anywhere in the generation, rendering and training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("division guard: {0}")]
    DivisionGuard(String),
    #[error("encoder error: {0}")]
    Encoder(String),
    #[error("gradient probe error: {0}")]
    Probe(String),
    #[error("non-finite loss component `{0}`")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint incompatible with model; mismatched parameters: {}", .0.join(", "))]
    IncompatibleCheckpoint(Vec<String>),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

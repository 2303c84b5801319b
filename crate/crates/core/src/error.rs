use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl From<png::DecodingError> for CoreError {
    fn from(e: png::DecodingError) -> Self {
        CoreError::Png(e.to_string())
    }
}

impl From<png::EncodingError> for CoreError {
    fn from(e: png::EncodingError) -> Self {
        CoreError::Png(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

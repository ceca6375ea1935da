use thiserror::Error;

#[derive(Error, Debug)]
pub enum MatteError {
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

impl MatteError {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        MatteError::Invalid { what, why: why.into() }
    }
}

pub type Result<T> = std::result::Result<T, MatteError>;

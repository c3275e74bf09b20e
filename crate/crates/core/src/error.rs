use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("stain matrix is near-singular: |det| = {det:e}")]
    Singular { det: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} with learning rate {learning_rate:e}: {detail}")]
    Divergence {
        epoch: usize,
        learning_rate: f64,
        detail: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Range(_) => "range",
            Error::Singular { .. } => "singular",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }
}

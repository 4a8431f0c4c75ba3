use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Domain(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("bad dataset: {0}")]
    Dataset(String),
    #[error("{0}")]
    Training(String),
    #[error(transparent)]
    Autodiff(#[from] rimsa_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

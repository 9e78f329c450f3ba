use std::path::PathBuf;

use semiseg_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("labeled ratio {0} is outside (0, 1]")]
    InvalidRatio(f64),
    #[error("weak fraction {weak} must lie in [0, 1 - ratio] (ratio {ratio})")]
    InvalidWeakFraction { weak: f64, ratio: f64 },
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("iteration {iter} exceeds max_iter {max_iter}")]
    IterationOutOfRange { iter: usize, max_iter: usize },
    #[error("non-finite value in {term} at iteration {iter}")]
    NonFinite { term: &'static str, iter: usize },
    #[error("invalid hyperparameter {name}: {reason}")]
    HyperParam { name: &'static str, reason: String },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("{0}")]
    Invalid(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

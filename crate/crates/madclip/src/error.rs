//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed caller input (shapes, ranges, non-finite values).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A documented call contract was violated (e.g. non-normalized rows).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Numeric failure such as a non-finite loss.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    Metric(String),
    /// Failure while loading a manifest, image, checkpoint or weights file.
    #[error("load error: {0}")]
    Load(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

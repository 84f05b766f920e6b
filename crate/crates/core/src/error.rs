//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Well-formed file of the wrong kind (bad magic, wrong channel count,
    /// unsupported bit depth, non-binary mask values, ...).
    #[error("format error: {0}")]
    Format(String),

    /// File that could not be decoded at all (truncated, bad header, ...).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid scene description or invalid numeric configuration.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Non-finite value produced while minimizing the objective.
    #[error("divergence at step {step} in {term}")]
    Divergence { step: usize, term: String },

    /// Metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

/// Shorthand used all over the crate to reject mismatched grids.
pub(crate) fn check_same_hw(
    what: &str,
    (ha, wa): (usize, usize),
    (hb, wb): (usize, usize),
) -> Result<()> {
    if (ha, wa) != (hb, wb) {
        return Err(Error::Dimension(format!(
            "{what}: expected {ha}x{wa}, got {hb}x{wb}"
        )));
    }
    Ok(())
}

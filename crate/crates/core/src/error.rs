use std::path::PathBuf;

use thiserror::Error;

use crate::lbfgs::OptimizerReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts, names or option values that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight validation failed at record `{record}`: {reason}")]
    WeightValidation { record: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Corruption { stored: u32, computed: u32 },

    #[error("spectrum size mismatch: image is {got_h}x{got_w}, exemplar spectrum is {want_h}x{want_w}")]
    SpectrumSize {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimizer aborted: {reason}")]
    Optimizer {
        reason: String,
        report: Box<OptimizerReport>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn weights(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::WeightValidation {
            record: record.into(),
            reason: reason.into(),
        }
    }
}

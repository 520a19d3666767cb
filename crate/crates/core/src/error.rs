use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QsimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QsimError {
    #[error("cannot parse format `{input}` at position {position}: {reason} (offending token `{token}`)")]
    FormatParse {
        input: String,
        position: usize,
        token: String,
        reason: String,
    },

    #[error("invalid format: {0}")]
    InvalidFormat(String),

    #[error("format {format} is too wide to enumerate ({bits} bits; at most 16 supported)")]
    WidthTooLarge { format: String, bits: u32 },

    #[error("clip threshold must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{context}: expected rank {expected}, got rank {actual}")]
    Rank {
        context: String,
        expected: String,
        actual: usize,
    },

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch { context: String, left: usize, right: usize },

    #[error("calibration needs at least one sample")]
    EmptySamples,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("static quantizer `{0}` has not been calibrated")]
    Uncalibrated(String),

    #[error("backward pass requested without a saved forward context ({0})")]
    MissingContext(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QsimError {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        QsimError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QsimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure comes from arithmetic (divergence, non-finite values)
    /// rather than from bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, QsimError::NonFiniteLoss { .. } | QsimError::NonFinite(_))
    }

    /// Whether the failure is a malformed request (bad format string, bad flag
    /// value, bad config) rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            QsimError::FormatParse { .. }
                | QsimError::InvalidFormat(_)
                | QsimError::InvalidArgument(_)
                | QsimError::Config(_)
                | QsimError::WidthTooLarge { .. }
        )
    }
}

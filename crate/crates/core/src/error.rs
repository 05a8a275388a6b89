use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("tensor `{name}`: manifest declares {declared} bytes but the blob holds {available}")]
    LengthMismatch {
        name: String,
        declared: usize,
        available: usize,
    },

    #[error("tensor `{name}` holds a non-finite value at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("code {code} outside the {bits}-bit range [{lo}, {hi}]")]
    CodeRange {
        code: i64,
        bits: u8,
        lo: i64,
        hi: i64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),

    #[error("unknown quantization operator `{0}`")]
    UnknownOperator(String),

    #[error("the analytic bound is undefined for {0}-bit quantization")]
    UnsupportedBits(u8),

    #[error("activation `{0}` is not supported here")]
    UnsupportedActivation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("expanded model carries no activation calibration")]
    MissingCalibration,

    #[error("accumulator overflow in layer `{layer}` ({term})")]
    AccumulatorOverflow { layer: String, term: String },

    #[error("scale {0} cannot be represented as a fixed-point multiplier")]
    MultiplierRange(f64),
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

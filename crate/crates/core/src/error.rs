use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON that does not match the network or input schema. `context` carries
    /// the field path and line/column reported by the parser.
    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error("dimension mismatch at layer {layer}: {detail}")]
    LayerDimension { layer: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("unsupported norm '{0}' (expected 1, 2 or inf)")]
    UnsupportedNorm(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no tangent point: {0}")]
    NoTangentPoint(String),

    #[error("vertex enumeration limited to 20 inputs, got {0}")]
    WindowTooLarge(usize),

    #[error("missing relaxation for layer {0}")]
    MissingRelaxation(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("network is not normalized: layer {0} is {1}")]
    NotNormalized(usize, &'static str),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

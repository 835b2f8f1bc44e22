//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two planes that must share a canvas do not.
    #[error("dimension mismatch in {context}: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        context: &'static str,
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },

    /// A pixel value fell outside the declared range for its plane.
    #[error("invalid value {value} at pixel ({y},{x}): expected {expected}")]
    InvalidPixel {
        y: usize,
        x: usize,
        value: f64,
        expected: &'static str,
    },

    /// Zero-sized canvas, empty pool, or other empty input where one is required.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A scalar parameter is out of its documented range.
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    /// Tensor shapes that must agree do not.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Embedding dimensionality disagreement.
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    /// Layer ordering broke the unique-and-contiguous-from-1 rule.
    #[error("invalid layer order: {0}")]
    InvalidLayerOrder(String),

    /// Token-group layout violated the attention/position contract.
    #[error("invalid token group layout: {0}")]
    InvalidGroupLayout(String),

    /// A tool service call failed after all retries.
    #[error("service {service} failed at {endpoint} after {attempts} attempt(s): {message}")]
    Service {
        service: String,
        endpoint: String,
        attempts: u32,
        message: String,
    },

    /// The embedding provider failed for a specific pool item.
    #[error("embedding provider failed for {item}: {message}")]
    Provider { item: String, message: String },

    /// Manifest schema version this build does not understand.
    #[error("unrecognized manifest schema version {found} (supported: {supported})")]
    UnknownSchema { found: u32, supported: u32 },

    /// Manifest structure or referenced files are invalid.
    #[error("invalid manifest {path}: {message}")]
    InvalidManifest { path: String, message: String },

    /// A stored sample violated an invariant on load.
    #[error("sample invariant violated in {path}: {message}")]
    InvariantViolation { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png codec error on {path}: {message}")]
    Png { path: String, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Configuration file or flag combination is unusable.
    #[error("config error: {0}")]
    Config(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(
        context: &'static str,
        (left_h, left_w): (usize, usize),
        (right_h, right_w): (usize, usize),
    ) -> Self {
        Error::DimensionMismatch {
            context,
            left_h,
            left_w,
            right_h,
            right_w,
        }
    }
}

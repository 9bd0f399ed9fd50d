//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An operation received operands whose shapes do not conform.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A Cholesky factorization hit a non-positive pivot; the matrix is not
    /// positive definite (after whatever loading the caller applied).
    #[error("matrix not positive definite: pivot {index} = {value:.6e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    /// A tape handle referenced a node that does not belong to this tape.
    #[error("variable #{index} is not on this tape (len {len})")]
    NotOnTape { index: usize, len: usize },

    /// Requested gradient output is not a scalar node.
    #[error("gradient output must be scalar, got shape {shape}")]
    NonScalarOutput { shape: String },

    /// No propagation path carries usable energy to the user.
    #[error("no usable propagation path for UE at ({x:.2}, {y:.2})")]
    EmptyChannel { x: f64, y: f64 },

    /// MRT or a gain computation received an identically-zero channel.
    #[error("zero channel vector")]
    ZeroChannel,

    /// A numeric quantity became non-finite during an iterative procedure.
    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    /// ODE integration produced a non-finite state.
    #[error("flow integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    /// Dataset (or split) too small for the requested operation.
    #[error("{what} requires at least {needed} entries, got {got}")]
    DatasetTooSmall {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    /// Channel resampling retry budget exhausted for one UE index.
    #[error("resampling UE index {index} exhausted {retries} retries")]
    RetriesExhausted { index: usize, retries: usize },

    /// A required artifact file is missing.
    #[error("missing artifact: {path}")]
    MissingArtifact { path: String },

    /// Configuration or schema violation.
    #[error("invalid config: {message}")]
    InvalidConfig { message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}

use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value violates its invariant.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm `{0}` used in inference mode before any statistics were recorded")]
    StatsNotRecorded(String),

    #[error("missing gradients for parameters: {}", .0.join(", "))]
    MissingGradients(Vec<String>),

    #[error("cannot assign {gts} ground truths to {locations} locations")]
    Capacity { gts: usize, locations: usize },

    #[error("image ids missing from {side}: {ids:?}")]
    IdMismatch { side: &'static str, ids: Vec<String> },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

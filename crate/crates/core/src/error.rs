use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its invariant. `key` names the field.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    /// Input arrays do not have the shape an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    /// A cluster does not have enough members to train a detector.
    #[error("degenerate cluster {cluster}: {reason}")]
    DegenerateCluster { cluster: u32, reason: String },
    /// An operation precondition on pipeline state is not met.
    #[error("invalid state: {0}")]
    State(String),
    /// A metric is undefined for the given input.
    #[error("undefined metric: {0}")]
    Undefined(String),
    /// Initialization found a category without any mined cluster.
    #[error("initialization failed: category `{category}` has no clusters")]
    NoClusters { category: String },
    /// Every cluster was emptied during an iteration.
    #[error("pipeline collapse at iteration {iteration}: {diagnostics}")]
    Collapse { iteration: usize, diagnostics: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            key,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

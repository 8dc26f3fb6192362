use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates its invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every IoU-weighted cross entropy term vanished, so the weight normalizer is 0/0.
    #[error("degenerate batch: sum of iou^eta * ce over positives is zero")]
    DegenerateBatch,

    /// Input outside the domain of a metric or loss.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("malformed volume data: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

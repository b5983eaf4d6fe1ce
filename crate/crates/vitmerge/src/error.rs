use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map one-to-one onto the failure classes the public operations can
/// hit; messages carry the offending tensor name, dimension pair, or training
/// diagnostics so callers can surface them without re-deriving context.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A linear system stayed singular even after the ridge retry.
    #[error("singular system in {op}: {detail}")]
    Singular { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// Inputs to a merge disagree (shape, task set, missing grams).
    #[error("merge error: {0}")]
    Merge(String),

    /// A dataset or label is malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss or was asked to run on bad inputs.
    #[error("training error: {0}")]
    Training(String),

    /// The gating network does not fit the models it is asked to route.
    #[error("gate error: {0}")]
    Gate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Every failure the library reports. Contract violations (shape or range
/// problems in caller-supplied data) are distinguished from I/O and format
/// failures so the CLI can print a stable machine-readable kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate mask: row {row} has no admissible entries")]
    DegenerateMask { row: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("variant unavailable ({0}); supply variant in dataset")]
    VariantUnavailable(String),

    #[error("no separable key/offset structure: every layer has the same entropy change")]
    NoSeparableStructure,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short, stable identifier used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateMask { .. } => "degenerate_mask",
            Error::Empty(_) => "empty",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::VariantUnavailable(_) => "variant_unavailable",
            Error::NoSeparableStructure => "no_separable_structure",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support: every entry is masked")]
    EmptySupport,

    #[error("unbounded divergence: p has mass at index {index} where q is zero")]
    UnboundedDivergence { index: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("NaN at index {index}")]
    NanInput { index: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate gates: renormalization denominator {denom:e} is below 1e-12")]
    DegenerateGates { denom: f64 },

    #[error("context overflow: {requested} tokens exceed max_seq_len {max}")]
    ContextOverflow { requested: usize, max: usize },

    #[error("token id {token} out of range for vocab size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: {context}")]
    TruncatedPayload { context: String },

    #[error("tensor shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{name}` in checkpoint")]
    MissingTensor { name: String },

    #[error("corpus line {line}: {reason}")]
    CorpusLine { line: usize, reason: String },

    #[error("no votable answers: every sample failed answer extraction")]
    NoVotableAnswers,

    #[error("vocab mismatch: base model has {base}, amateur has {amateur}")]
    VocabMismatch { base: usize, amateur: usize },

    #[error("utilization defined for single-expert weak routing")]
    MultiExpertWeak,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class used by the CLI: 3 for I/O and file parsing, 4 for
    /// numeric and model errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::CorpusLine { .. } => 3,
            _ => 4,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at op {op_index}: {detail}")]
    ShapeMismatch { op_index: usize, detail: String },

    #[error("tensor construction: {0}")]
    Tensor(String),

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("missing tensor `{0}` in weight manifest")]
    MissingTensor(String),

    #[error("weight checksum mismatch: manifest {expected}, file {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("manifest version `{0}` is not supported")]
    BadVersion(String),

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("prompt length {len} exceeds model maximum {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("prompt pair has mismatched lengths ({clean} vs {noise})")]
    LengthMismatch { clean: usize, noise: usize },

    #[error("invalid node {0} for this model/prompt")]
    InvalidNode(String),

    #[error("budget {budget} cannot cover the {required} required measurements")]
    BudgetTooSmall { budget: u64, required: u64 },

    #[error("non-finite value produced during {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("zero-norm vector at {node}")]
    ZeroNorm { node: String },

    #[error("unresolved leaf `{0}`")]
    UnresolvedLeaf(String),

    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),

    #[error("parameter `{0}` is not trainable")]
    NotTrainable(String),

    #[error("root node must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid layer range {start}..{end} for activations at depth {depth} (N = {layers})")]
    InvalidRange {
        start: usize,
        end: usize,
        depth: usize,
        layers: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("text of {len} tokens exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("template must contain exactly one [CLS] placeholder (found {0})")]
    Template(usize),

    #[error("empty class list")]
    EmptyClasses,

    #[error("label {0} is not in the class subset")]
    LabelNotInSubset(usize),

    #[error("class {0} is the true class and cannot be removed")]
    RemovesTrueClass(usize),

    #[error("cache miss: {0}")]
    CacheMiss(String),

    #[error("duplicate sample id {0}")]
    DuplicateSample(usize),

    #[error("provenance mismatch: cache built for {expected}, model is {actual}")]
    Provenance { expected: String, actual: String },

    #[error("model configs differ")]
    ConfigMismatch,

    #[error("training diverged at {context}: loss is not finite")]
    Diverged { context: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.into(),
            detail: detail.into(),
        }
    }
}

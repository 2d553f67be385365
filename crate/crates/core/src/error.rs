use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("layer `{node}`: {source}")]
    Node { node: String, source: Box<Error> },

    #[error("tensor must have every dimension >= 1, got {0:?}")]
    EmptyTensor([usize; 4]),

    #[error("tensor data length {len} does not match shape {dims:?}")]
    DataLength { dims: [usize; 4], len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: u8, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing activation for `{0}`")]
    MissingActivation(String),

    #[error("cannot fold batch norm `{0}`: {1}")]
    Fold(String, String),

    #[error("cannot prune: {0}")]
    Prune(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn at_node(self, node: &str) -> Self {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node { node: node.into(), source: Box::new(e) },
        }
    }
}

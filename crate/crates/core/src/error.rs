use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0} is conditional and requires a context tensor")]
    MissingContext(&'static str),

    #[error("{0} used before initialization")]
    Uninitialized(String),

    #[error("non-finite value while perturbing parameter {name}[{index}]")]
    NonFiniteObjective { name: String, index: usize },

    #[error("non-finite loss {loss} at iteration {iteration} (batch seed {batch_seed})")]
    Diverged {
        iteration: u64,
        batch_seed: u64,
        loss: f64,
    },

    #[error("oracle not applicable: {0}")]
    Oracle(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("descriptor: {0}")]
    Descriptor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Descriptor(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

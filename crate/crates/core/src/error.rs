use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{primitive}: shape mismatch {shapes:?}")]
    Shape {
        primitive: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} does not exist on this tape")]
    DanglingNode(usize),

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format version: {0}")]
    Version(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<Error> },
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            inner: Box::new(self),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

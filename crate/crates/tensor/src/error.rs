use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("layer {index} ({kind}): {message}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        message: String,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("gradient requested for a non-scalar value of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor `{0}` has a quantized dtype and cannot carry a gradient")]
    QuantizedGradient(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unexpected parameter `{0}` not declared by the graph")]
    UnexpectedParam(String),
    #[error("parameter `{name}` has shape {actual:?}, graph expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("duplicate parameter name `{0}` in graph")]
    DuplicateParam(String),
    #[error("missing gradient for trainable tensor `{0}`")]
    MissingGradient(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("expected a {expected} tensor, found {actual}")]
    DType {
        expected: &'static str,
        actual: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

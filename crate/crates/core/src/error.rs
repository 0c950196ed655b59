use ids_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown injector `{0}`")]
    UnknownInjector(String),
    #[error("label {label} outside 0..{classes}")]
    LabelRange { label: usize, classes: usize },
    #[error("non-finite {what} loss at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("container: {0}")]
    Container(String),
    #[error("covariance is not positive definite after regularization")]
    NotPositiveDefinite,
    #[error("missing quantization parameters for `{0}`")]
    MissingQParams(String),
    #[error("pruning `{layer}` would leave no filters")]
    EmptyLayer { layer: String },
    #[error("32-bit accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: usize },
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

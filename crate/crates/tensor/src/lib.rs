//! Minimal dense-tensor engine: storage tensors, declarative layer graphs,
//! a differentiable tape with higher-order gradients, and optimizers.

pub mod error;
pub mod forward;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use forward::{bind, forward, forward_on_tape, forward_with_side, param_gradients, Bound, ForwardOutput};
pub use graph::{conv_out_len, GraphSpec, Layer};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{DType, Storage, Tensor};

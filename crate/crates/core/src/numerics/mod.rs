//! Tensor values, the autodiff graph, optimization and checkpointing.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{from_bytes, load, peek_precision, save, to_bytes};
pub use gradcheck::{
    finite_difference_gradient, max_relative_error, relative_error, DEFAULT_FD_STEP,
    GRADCHECK_TOLERANCE,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_gradients, AdamW, AdamWConfig, LrSchedule};
pub use params::ParamSet;
pub use scalar::{Precision, Scalar};
pub use tensor::{matmul2, Tensor};

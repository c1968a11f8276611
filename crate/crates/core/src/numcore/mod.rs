//! Tensors, networks, optimizers, random streams and the FSTN file format.

pub mod checkpoint;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_coords, finite_diff_grad, gradient_mismatch};
pub use io::{tensor_read, tensor_read_f32, tensor_write};
pub use loss::{grad_input, grad_params, LossFn, Targets};
pub use nn::{LayerSpec, Network, Topology};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, StepDecay};
pub use rng::RngStream;
pub use tensor::{AnyTensor, DType, Real, Tensor};

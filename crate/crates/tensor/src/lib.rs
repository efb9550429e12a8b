//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! The primitive set is deliberately small: elementwise arithmetic with
//! broadcasting, `matmul`, 2-D convolution and its transpose, the usual
//! activations, reductions, reshaping, clamping, softmax, and a seeded
//! Gaussian noise source. Everything runs on the CPU in a fixed order, so
//! repeated runs are bit-identical.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_at, grad_check_params, primitive_suite, GradCheckEntry, GradCheckReport};
pub use graph::{Attrs, Gradients, Graph, Primitive, Var, LEAKY_RELU_SLOPE};
pub use optim::{Adam, Sgd};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, SeededRng};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are row-major; sequence data is laid out time-major (`T×C`).
//! Operations that have no closed form in this crate (signal transforms,
//! distortions, quantizers) are added by callers through [`Graph::custom`].

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{log_sum_exp, sigmoid_scalar, softmax_in_place, BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use params::{accumulate_grads, grad_norm, Adam, AdamConfig, ParamStore};
pub use tensor::{gemm, Tensor};

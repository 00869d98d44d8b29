//! A compact reverse-mode automatic differentiation engine over `f64`
//! tensors.
//!
//! Backward rules are built from the same differentiable ops as the forward
//! pass, so `grad(.., create_graph = true)` yields tensors that can be
//! differentiated again. Graphs are `Send + Sync`; independent graphs can
//! be built and differentiated on different threads.

mod backward;
pub mod finite_diff;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tensor;

pub use backward::{backward, grad, Gradients};
pub use ops::{normal_cdf, normal_pdf, ConvGeom};
pub use params::{GradBuffer, Init, ParamError, ParamId, ParamStore};
pub use tensor::Tensor;

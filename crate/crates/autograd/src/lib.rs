//! Dense `f64` tensors and a small reverse-mode autodiff tape.
//!
//! The op set is exactly what the segmentation model needs: im2col
//! convolutions with a temporal axis, depthwise convolutions, matrix products,
//! instance normalization, channel pooling, local window attention and a
//! pixelwise cross-entropy.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_params, GradCheck, GradCheckReport};
pub use graph::{sigmoid, softmax_in_place, Gradients, Graph, NodeId, PairPool};
pub use kernels::ConvSpec;
pub use params::ParamStore;
pub use tensor::Tensor;

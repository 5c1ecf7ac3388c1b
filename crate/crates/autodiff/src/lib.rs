//! Dense-tensor reverse-mode automatic differentiation, sized for toy
//! transformer language models on a CPU.
//!
//! Graphs are recorded first and evaluated by [`Graph::forward`]; the fused
//! attention, layer-norm and cross-entropy operations keep whatever they need
//! for [`Graph::backward`]. Graphs are generic over the element type; models
//! use `f32`, gradient checks can use `f64`. Everything is single-threaded.

mod element;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use element::Element;
pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};
pub use graph::{AttentionSpec, CustomOp, Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over row-major `f64` tensors.
//!
//! The engine is a Wengert tape: every operation appends a node to a
//! [`Graph`] and [`Graph::backward`] replays the tape in reverse. The op set
//! is exactly what the codec and the language models need: 1-D
//! convolutions (plain and transposed), matrix products, layer
//! normalization, causal attention, embeddings and cross-entropy.

mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{AttnMap, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, ExpDecay};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

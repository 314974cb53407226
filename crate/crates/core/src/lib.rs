//! Dynamic layer aggregation for deep encoder/decoder models.
//!
//! The hidden states of every layer of a small self-attention encoder/decoder
//! are fused into one representation by one of several strategies: a static
//! per-dimension linear combination, position-wise feed-forward weights, or
//! capsule routing-by-agreement (dynamic routing or EM routing). Everything
//! runs on a small `f64` tensor library with tape-based reverse-mode
//! differentiation so that the whole stack can be gradient-checked.

pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
pub mod param;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

//! Gated recurrent fusion of multimodal sensor sequences.

pub mod cells;
pub mod cli;
pub mod codec;
pub mod error;
pub mod gates;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod par;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod matching;
pub mod model;
pub mod nn;
pub mod taa;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{CustomOp, Gradients, Graph, ParamId, ParamStore, Var};
pub use tensor::Tensor;

//! Minimal tensor math with reverse-mode differentiation, the transformer
//! backbone and flow action expert, Adam, and checkpoint I/O.

pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod store;
pub mod tensor;

pub use graph::{AttnMask, Graph, Var};
pub use model::{Backbone, BackboneConfig, KVCache};
pub use store::{AdamParams, ParamStore};
pub use tensor::{Scalar, Tensor};

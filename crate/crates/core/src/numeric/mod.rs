//! Dense `f64` tensors, a reverse-mode tape, and parameter storage.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod serialize;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use params::{ParamGroup, ParamId, ParamStore, Session};
pub use tensor::{argmax, Tensor};

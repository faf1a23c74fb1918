pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{gradcheck, Bindings, Graph, NodeId, Op};
pub use optim::{AdamWHyper, AdamWState};
pub use tensor::{Tensor, TensorError};
pub mod dataset;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod train;
pub mod model;
pub mod world;

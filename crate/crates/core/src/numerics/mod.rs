//! Dense tensors, a reverse-mode tape, and the differentiable operations
//! the network is built from.

pub mod float;
pub mod gradcheck;
mod graph;
mod init;
pub mod ops;
mod params;
mod tensor;

pub use float::Float;
pub use gradcheck::{GradCheck, GradCheckReport};
pub use graph::{GradSink, Gradients, Graph, Mode, Var};
pub use init::Init;
pub use ops::{Conv2dOpts, Unary};
pub use params::{Buffer, BufferId, ParamId, ParamStore, Parameter, Scope};
pub use tensor::Tensor;

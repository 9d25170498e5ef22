//! Minimal dense-tensor arithmetic with tape-based reverse-mode
//! differentiation, finite-difference gradient checks, and a versioned
//! binary checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{write_atomic, Container, ContainerWriter};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, CheckStatus, ParamCheck};
pub use graph::{forward, Gradients, Graph, NodeId};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

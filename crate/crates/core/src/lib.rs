//! Selective state-space models with Switch-style mixture-of-experts layers,
//! built on a small reverse-mode autodiff engine.

pub mod arch;
pub mod error;
pub mod gradcheck;
pub mod mamba;
pub mod moe;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{Module, Param, Role};
pub use tensor::{DType, Element, Gradients, Graph, ScanMode, Tensor, Var};

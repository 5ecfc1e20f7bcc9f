//! Identity-preserving diffusion inpainting with parallel visual attention.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod identity;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

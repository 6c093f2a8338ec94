//! Rectified-flow-matching editor for synthetic event spectrograms.

pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

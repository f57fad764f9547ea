pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

//! Edge-reparameterized attention network for multi-scene visibility
//! enhancement: a dense NCHW tensor substrate with reverse-mode
//! differentiation, the Kirsch-guided reparameterization block and its
//! closed-form fusion, the attention residual network built from it,
//! synthetic degradations, restoration losses and a toy-scale trainer.

pub mod attention;
pub mod autodiff;
pub mod degrade;
pub mod error;
pub mod kirsch;
pub mod losses;
pub mod model;
pub mod ops;
pub mod reparam;
pub mod tensor;
pub mod train;
pub mod weights;

#[cfg(test)]
mod testutil;

pub use autodiff::{Backend, Eager, Gradients, Tape, Var};
pub use error::{DegradeError, FormatError, ModelError, TensorError, TrainError};
pub use tensor::{Real, Shape, Tensor4};

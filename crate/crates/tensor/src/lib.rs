//! Minimal dense tensors with tape-based reverse-mode autodiff and an Adam
//! optimizer, enough to train small convolutional and fully connected nets.

mod adam;
mod conv;
mod error;
mod real;
mod tape;
mod tensor;

pub use adam::Adam;
pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{LinearMap, Tape, Var};
pub use tensor::Tensor;

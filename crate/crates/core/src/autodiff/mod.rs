//! Dense tensors, a reverse-mode gradient tape, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Binder, ParamGrads, ParamId, ParamSet};
pub use tape::{sigmoid, softmax, Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

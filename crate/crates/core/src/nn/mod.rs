//! Minimal differentiable numeric substrate: tensors, a recorded tape with per-op
//! backward rules, named parameters, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LN_EPS, NORM_EPS};
pub use tensor::Tensor;


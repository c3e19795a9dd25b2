//! Minimal differentiable-computation kernel: 64-bit tensors, a reverse-mode
//! tape covering exactly the primitives the forecaster, weight-VAE and flow
//! networks need, Adam, and a finite-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, one_cycle_lr, AdamState};
pub use gradcheck::grad_check;
pub use layers::{BoundParams, ParamStore};
pub use tape::{ConstId, Tape, Var};
pub use tensor::Tensor;

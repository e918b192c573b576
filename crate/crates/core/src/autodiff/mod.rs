//! Minimal reverse-mode differentiation kernel and the neural building
//! blocks used by the learned models: tensors, a computation tape, two-layer
//! MLPs, a GRU cell, Adam, checkpoints, and a finite-difference checker.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, OptimError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use nn::{Activation, Binding, GruCell, Mlp2, OutputHead, ParamId, ParamStore};
pub use tape::{Gradients, SegmentSpec, Tape, ValueId};
pub use tensor::Tensor;

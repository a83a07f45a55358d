//! Deterministic reverse-mode autodiff: tensors, the op tape, the numeric
//! kernels underneath, Adam, and the finite-difference verifier.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use kernels::PadMode;
pub use tape::{BnMode, BnRunning, NodeId, Tape};
pub use tensor::{Dtype, Scalar, Tensor};

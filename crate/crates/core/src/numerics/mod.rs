//! Dense tensors, reverse-mode differentiation, AdamW and checkpoints.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, PrimitiveKind, Probe};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

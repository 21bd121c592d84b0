//! Dense f64 tensors with a single-use reverse-mode tape and segment checkpointing.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, OpKind, SegmentFn, Tape, TapeStats, Var};
pub use tensor::{numel, Tensor};

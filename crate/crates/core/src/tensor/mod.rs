//! Dense tensors, a reverse-mode tape, and Adam.

mod checkpoint;
mod dense;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{read_tensors, write_tensors};
pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{AdamConfig, BoundParams, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};

//! Dense tensors, a reverse-mode tape, AdamW and a finite-difference checker.

pub mod checkpoint;
mod gemm;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_tape_fn, finite_diff_check};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

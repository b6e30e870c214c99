//! Dense `f64` tensors, a reverse-mode gradient tape and the `TNSR` file format.
//!
//! All arithmetic is 64-bit and single-threaded. Operations are per-sample;
//! there is no batch dimension.

mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{BatchNormMode, BatchStats, Function, RunningStats, Tape, Var, BATCHNORM_EPS};
pub use tensor::{IntTensor, Tensor};

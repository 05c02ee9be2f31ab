//! Dense `f64` tensors and a reverse-mode gradient tape over the fixed op set
//! used by the denoiser, the neural decoder and the evaluation probe.

mod error;
pub mod gradcheck;
pub mod io;
mod kernels;
mod rotary;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, grad_check_with};
pub use io::{read_unt1, write_unt1};
pub use rotary::RotaryTable;
pub use tape::{gelu_scalar, OpKind, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod adam;
pub mod exec;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{AdamParams, AdamState};
pub use exec::{EvalExec, Exec};
pub use gradcheck::grad_check;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

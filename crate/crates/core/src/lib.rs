pub mod autodiff;
pub mod bounds;
pub mod distributions;
pub mod error;
pub mod experiments;
pub mod fdiv;
pub mod kv;
pub mod models;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};

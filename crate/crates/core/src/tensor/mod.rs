//! Minimal dense f64 tensor library with reverse-mode differentiation.
//!
//! Everything downstream (text encoder, fusion encoder, co-attention,
//! decoder) is built from the ops in this module, so every model path is
//! finite-difference checkable end to end.

mod conv;
mod error;
pub mod kernels;
mod ops;
mod raw;
mod sample;
mod tape;

pub use error::{invalid_arg, Result, TensorError};
pub use raw::RawTensor;
pub use tape::{GradSink, NodeVal, Tape, Var};

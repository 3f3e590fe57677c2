//! Toy-scale referring image segmentation stack.
//!
//! A from-scratch f64 tensor library with reverse-mode differentiation, a
//! bidirectional GRU text encoder, a multi-modal fusion encoder with vanilla
//! and asymmetric co-attention, a boundary-enhanced FPN decoder, a synthetic
//! shapes-and-expressions dataset, segmentation metrics, and training glue.

pub mod checks;
pub mod coattn;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

//! Low-bit quantization of embedding networks with data-free recovery.
//!
//! A full-precision teacher is quantized with asymmetric per-channel weight
//! and per-tensor activation quantizers, then fine-tuned through
//! fake-quantization nodes (straight-through gradients) to reproduce the
//! teacher's normalized embeddings on unlabeled synthetic data.

pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod graph;
pub mod net;
pub mod pipeline;
pub mod quant;
pub mod seed;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{EmbeddingNet, Mode};
pub use quant::{BitWidth, QuantParams};
pub use tensor::{Axis, Tensor};

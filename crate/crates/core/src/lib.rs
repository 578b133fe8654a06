//! Mixed-precision quantized neural networks: quantizers, bit-packed tensors,
//! integer and popcount kernels, layer-wise bitwidth schedules, training with
//! straight-through gradients, and packed deployment.

pub mod arch;
pub mod bits;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod model_file;
pub mod net;
pub mod quant;
pub mod schedule;
pub mod tensor;

pub use error::{QbitError, Result};

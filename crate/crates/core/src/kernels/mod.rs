//! Multiply-accumulate engines.
//!
//! All code kernels accumulate exactly in integers and apply one real multiply
//! per output ([`scale_accumulator`]), so they agree with each other bit for bit
//! and with [`gemm_reference`] on reconstructed tensors up to that final rounding.
//! No kernel reduces across outputs, so splitting the output rows between
//! workers gives identical results.

mod conv;
mod gemm;
mod popcount;

pub use conv::{conv2d_quantized, conv2d_reference, ConvGeometry};
pub use gemm::{
    accumulator_bound, gemm_int_codes, gemm_int_codes_rows, gemm_reference, needs_wide_accumulator,
    scale_accumulator,
};
pub use popcount::{gemm_bitserial, gemm_xnor};

pub(crate) use conv::{col2im, conv2d_real_raw, conv_codes_acc, im2col, ConvWeights};

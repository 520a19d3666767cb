//! Simulated mixed-precision quantization.
//!
//! The building blocks are numerical formats ([`formats`]), quantize-dequantize
//! with calibrated thresholds ([`quant`], [`calibration`]), block floating
//! point ([`abfp`]) and per-channel smoothing ([`smoothing`]). The [`engine`]
//! wires them into a small layer graph whose matmul layers carry input, weight
//! and optional output quantizers, with a straight-through backward pass for
//! quantization-aware training.

pub mod abfp;
pub mod calibration;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod flat;
pub mod formats;
pub mod manifest;
pub mod quant;
pub mod smoothing;
pub mod sweep;
pub mod tasks;
pub mod tensor;

pub use error::{QsimError, Result};
pub use formats::{enumerate, round_to_bf16, round_to_format, NumericFormat, ValueTable};
pub use tensor::Tensor;

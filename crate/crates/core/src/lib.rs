//! Integer-only inference for binary-weight, 2-bit-activation residual
//! networks (ERNs).
//!
//! The pipeline is: thermometer pixel embedding ([`pixembed`]), bit-packed
//! ±1 convolutions ([`kernels`]), per-channel integer threshold activations
//! ([`quant`]), integer residual adds, and a single scaled average pool at
//! the very end. [`compiler`] folds a float checkpoint into that form,
//! [`graph`] builds and runs the network, and [`oracle`] re-executes the
//! same quantized math in `f64` to certify the integer engine.

pub mod compiler;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod oracle;
pub mod par;
pub mod pixembed;
pub mod quant;
pub mod tensor;

pub use error::{Error, FormatError, Result};

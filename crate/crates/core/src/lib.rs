//! Post-training quantization toolkit for masked-diffusion language models.
//!
//! The crate bundles a small bidirectional mask-predictor transformer
//! ([`dllm`]), integer quantizers ([`quant`]), stratified calibration
//! sampling ([`tmas`]), calibrated weight and activation quantization
//! methods ([`methods`]) and an experiment harness ([`harness`]) for
//! measuring how quantization error accumulates over decoding steps.

pub mod dllm;
pub mod error;
pub mod harness;
pub mod methods;
pub mod numerics;
pub mod quant;
pub mod tmas;

pub use error::{Error, Result};

/// Library version recorded in manifests and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

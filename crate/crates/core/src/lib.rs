//! powq-core: post-training quantization for dense networks built on a
//! power-exponent operator family.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`]: minimal dense tensors (f32 storage, f64 accumulation);
//! - [`quant`]: the power quantization operator family, uniform at
//!   exponent 1, with per-tensor / per-channel / per-group scales;
//! - [`model`]: dense-network runtime, model and dataset i/o, fixture
//!   training, full-precision and fake-quantized evaluation;
//! - [`search`]: data-free search for a shared power exponent by
//!   derivative-free minimization of the reconstruction error;
//! - [`optim`]: layer-wise calibration optimization that learns quantized
//!   weights through differentiable soft quantization and, optionally, the
//!   per-layer power exponent through a stabilized backward pass.

pub mod model;
pub mod optim;
pub mod quant;
pub mod search;
pub mod tensor;

pub use quant::{QuantConfig, QuantizedTensor};
pub use tensor::{Granularity, Tensor};

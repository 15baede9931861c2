//! Quantization-friendly separable convolutions at desk scale.
//!
//! The crate trains mini MobileNet-style networks on a procedural dataset,
//! exposes the batch-norm scale pathology of depthwise layers, rewrites
//! networks into the quantization-friendly form, calibrates 8-bit
//! post-training quantization with a greedy clip search, runs a fixed-point
//! engine, and scores runs with the wall-time metric.
//!
//! # Feature flags
//!
//! - **`parallel`** *(default)*: data-parallel calibration and evaluation
//!   through rayon. Without it the same code paths run sequentially and
//!   produce identical results.

pub mod bench;
pub mod calib;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod float_engine;
pub mod int8;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use exec::Exec;

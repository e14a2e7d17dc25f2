//! Few-shot medical anomaly detection with a frozen CLIP-style backbone.
//!
//! The model keeps multi-level vision and text encoders frozen and learns
//! only a small set of parameters on top of them:
//!
//! * a dual-branch adapter bank (shared projection + detection and
//!   segmentation heads, one set per normal/abnormal branch, per tap layer),
//! * learnable prompt context tokens for a normal and an abnormal prompt
//!   ensemble, and
//! * a handful of scalar loss/score parameters (softmax logit scale,
//!   sigmoid-loss temperature and bias).
//!
//! Patch features are compared against the two text anchors to produce
//! per-patch normality/abnormality scores, which aggregate into a pixel-level
//! anomaly map and an image-level anomaly score. Training minimizes a
//! Dice + Focal + sigmoid-pairwise composite loss summed over feature levels.
//!
//! All numeric code is generic over the scalar type (`f32` or `f64`) through
//! the [`scalar::Scalar`] trait; concrete aliases are exported below.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod prompts;
pub mod scalar;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor.
pub type TensorF32 = tensor::Tensor<f32>;
/// Double-precision tensor.
pub type TensorF64 = tensor::Tensor<f64>;
/// Single-precision autodiff tape.
pub type TapeF32 = autodiff::Tape<f32>;
/// Double-precision autodiff tape.
pub type TapeF64 = autodiff::Tape<f64>;

//! Patch-grid localization with limited bounding-box annotation.
//!
//! A small anti-aliased CNN maps an image to a P×P grid of per-class patch
//! probabilities. A pixel-adaptive CRF refines them. Training combines a few
//! box-annotated images with many image-level labels through hinge losses on
//! patch counts, whose thresholds alternate with the weights.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below fix
//! the training precision.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod crf;
pub mod error;
pub mod grid;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod runner;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod threshold_fit;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<Real>;
pub type Tape64 = tensor::Tape<Real>;
pub type ParamSet64 = tensor::ParamSet<Real>;
pub type PatchScores64 = grid::PatchScores<Real>;
pub type PatchScores32 = grid::PatchScores<f32>;

//! Class-agnostic detection proposals for forward-looking sonar images.
//!
//! The pipeline scores 96x96 image windows with a small convolutional
//! network trained to regress an objectness value in `[0, 1]`, then turns
//! dense window scores into ranked, non-overlapping proposal boxes. A
//! template-matching scorer built from normalized cross-correlation against
//! stored object patches serves as the classical baseline.
//!
//! Modules:
//! - [`tensor`]: f32 tensors plus forward/backward kernels (conv, pooling,
//!   dense, activations, resampling, correlation).
//! - [`model`]: the two network architectures, initialization, inference,
//!   backprop, and the dense-to-convolutional conversion.
//! - [`geometry`], [`dataset`], [`synth`]: boxes and overlap, window
//!   labelling and patch extraction, synthetic sonar rendering.
//! - [`train`]: Adam optimization with early stopping.
//! - [`proposals`]: dense objectness maps (window-wise or fully
//!   convolutional) and threshold/ranking extraction with overlap
//!   suppression.
//! - [`template`]: the cross-correlation baseline scorer.
//! - [`eval`]: recall measurement, score sweeps, and timing benchmarks.
//! - [`weights`], [`imageio`]: model/template serialization and 8-bit
//!   grayscale image I/O.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imageio;
pub mod model;
pub mod proposals;
pub mod synth;
pub mod template;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use tensor::Tensor;

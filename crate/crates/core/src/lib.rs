//! Compact two-stage heatmap network for facial landmark alignment.
//!
//! Stage one runs a small inverted-residual backbone to coarse per-landmark
//! heatmaps decoded by soft-argmax. Stage two crops shared features around
//! every coarse point with RoI align and predicts an offset heatmap per
//! landmark through one grouped convolution. Around that sit a tape-based
//! autodiff core, training and evaluation, a data pipeline with a synthetic
//! face generator, a frame-to-frame tracker, and a makeup renderer.

pub mod data;
pub mod error;
pub mod heatmap;
pub mod imaging;
pub mod landmarks;
pub mod model;
pub mod nn;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use landmarks::{FacePart, LandmarkLayout, LandmarkSet, LayoutName, PointTag, Subset};
pub use tensor::{Real, Tensor};

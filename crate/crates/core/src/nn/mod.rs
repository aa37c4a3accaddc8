//! Convolutional building blocks and compute accounting.

pub mod account;
pub mod block;
pub mod conv;
pub mod graph;
pub mod norm;
pub mod roi;

pub use account::{account, ComputeBudget, LayerCost};
pub use block::InvertedResidualSpec;
pub use conv::{conv2d_forward as conv2d, Activation, ConvSpec};
pub use graph::{inverted_residual, Graph};
pub use norm::{fold_batch_norm, BN_EPS};
pub use roi::{roi_align, roi_align_batched, RoiBox};

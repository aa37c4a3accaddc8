//! The two-stage alignment network: configuration, parameters, forward
//! pass, file format and tracking.

pub mod config;
pub mod io;
pub mod network;
pub mod track;
pub mod weights;

pub use config::{scale_channels, BlockBase, ConvUnit, ModelConfig};
pub use io::{from_bytes, load, save, serialized_size, to_bytes};
pub use network::{
    build_forward, build_stage1, build_stage2, decode_refined, flip_consistency, flip_image, flip_normalized,
    ForwardVars, Stage1Output, Stage2Output,
};
pub use track::{crop_box, track, TrackState, TRACK_MARGIN};
pub use weights::{manifest, training_manifest, ManifestEntry, ModelWeights, RunningStats, TrainableModel};

use crate::nn::{account, ComputeBudget};

/// Parameter and compute counts of the deployed network, with the exact
/// serialized size.
pub fn budget(config: &ModelConfig) -> ComputeBudget {
    ComputeBudget {
        model_bytes: serialized_size(config),
        ..account(&config.layer_costs())
    }
}

//! Training, evaluation and benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod loss;
pub mod trainer;

pub use bench::{bench, BenchReport};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{Preset, TrainConfig};
pub use eval::{evaluate, evaluate_predictions, predict_samples, EvalReport};
pub use loss::{build_loss, offset_target, LossVars};
pub use trainer::{load_datasets, prepare_batch, prepare_sample, sample_seed, train, Batch, EpochMetrics, StepLoss, TrainOutcome, Trainer};

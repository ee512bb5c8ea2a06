//! Neural substrate: tape-based reverse-mode differentiation in f64, synthetic data, the
//! backbone and side-branch models, training loops and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod tape;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub use checkpoint::{load_checkpoint, read_curves, save_checkpoint, write_curves, CheckpointMeta, CHECKPOINT_VERSION};
pub use data::{generate, generate_pool, DataRecipe, Split, SplitSizes, SyntheticDataset};
pub use model::{
    accuracy, adapter_forward, backbone_features, build_backbone, build_subnetwork, forward_backbone, forward_combined, Backbone, BackboneArch,
    FrozenGroups, ModelState, SubNetwork,
};
pub use tape::{Tape, Tensor};
pub use train::{
    backbone_accuracy, clip_gradients, combined_accuracy, total_poison_loss, train_backbone, train_candidate, train_poisoned, CandidateOptions,
    CandidateTrainer, EpochCurve, FeatureCache, LossParts, SgdOptions, TrainConfig, TrainFailure,
};

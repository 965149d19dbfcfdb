//! Configuration, training loop, checkpointing, ablation runner.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use config::{fingerprint, AblationConfig, DataConfig, RunConfig, TrainConfig};
pub use train::{
    ablate, ablation_rows, evaluate_model, train, AblationRow, HarnessError, LossRecord, TrainOutcome,
    TrainedModel,
};

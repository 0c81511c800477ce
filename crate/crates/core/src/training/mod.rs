//! Semi-supervised training: batch sampling, alternating critic and main
//! updates, Adam on a triangular learning-rate wave, parameter averaging,
//! early stopping and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod step;
mod trainer;

pub use checkpoint::{load_checkpoint, load_manifest, load_weights_into, save_checkpoint, save_weights, Checkpoint, Manifest};
pub use config::{canonical_key, ConfigKey, TrainingConfig, CONFIG_KEYS};
pub use optim::{ema_update, triangular_lr, Adam, AdamConfig};
pub use step::{
    train_step, LabelledBatch, PairBatch, StepBatches, StepSettings, TrainingState, GAN_COLLAPSE_STEPS,
    GAN_COLLAPSE_THRESHOLD,
};
pub use trainer::{
    annotated_phases, labelled_frames, log_row, parallelism, predict_masks, runs_root, segmentation_loss, train,
    BatchSampler, EpochSummary, TrainOutcome, LOG_HEADER,
};

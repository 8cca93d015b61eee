//! Learning-rate schedule, Adam, checkpoints and the update loops.

pub mod checkpoint;
pub mod optim;
pub mod run;

pub use checkpoint::{config_fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, CheckpointData, ModelState};
pub use optim::{lr_at, Adam, OptimConfig, UpdateStats};
pub use run::{finetune_update, pretrain_update, sample_batch, BatchConfig, FinetuneRecord, StepRecord};

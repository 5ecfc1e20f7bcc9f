//! Optimizer, per-step sampling and the training phases.

pub mod optim;
pub mod sampling;
pub mod trainer;

pub use optim::{AdamW, AdamWConfig};
pub use sampling::{sample_caption, sample_reference_subset, stratified_times, ReferenceDraw, MAX_REFERENCES};
pub use trainer::{
    apply_update, continue_pretrain, dsm_loss_and_grads, finetune_identity, init_pva_params, no_log, pretrain_base,
    train_pva, CsvLog, Draw, Phase, StepLog, TrainConfig, TrainState, LOG_HEADER,
};

//! Byte-level language-model training: data, schedule, optimizer, logging,
//! checkpoints and curve comparison.

mod checkpoint;
mod config;
mod data;
mod optim;
mod runlog;
mod schedule;
mod speedup;
mod trainer;

pub use checkpoint::{
    read_manifest, ArrayEntry, Checkpoint, Manifest, TrainState, FORMAT as CHECKPOINT_FORMAT,
};
pub use config::TrainConfig;
pub use data::{
    decode, encode, sample_batch, sequential_windows, tokenize_bytes, Batch, BYTE_VOCAB,
};
pub use optim::{check_finite, clip_grad_norm, AdamW, ADAM_EPS, BETA1, BETA2};
pub use runlog::{ema_update, LogRecord, RunLog, CSV_HEADER, EMA_ALPHA};
pub use schedule::{lr_at, Schedule};
pub use speedup::{speedup_at, LossCurve};
pub use trainer::{
    evaluate, model_from_checkpoint, train, TrainOptions, TrainSummary, Trainer, CHECKPOINT_FILE,
    DIVERGE_FACTOR, DIVERGE_WINDOW, RUNLOG_FILE,
};

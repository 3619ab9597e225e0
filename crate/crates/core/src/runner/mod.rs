//! Run configuration, the training loop and the command implementations.

pub mod commands;
pub mod config;
pub mod tables;
pub mod trainer;

pub use commands::{derive_seed, evaluate, online, pretrain, read_run, report, OnlineOutcome, PretrainOutcome, RunSummary};
pub use config::{Method, RunConfig};
pub use trainer::{task_loss, StepPolicy, StepRecord, Trainer};

//! Configuration, training, evaluation, and persistence.

mod checkpoint;
mod config;
mod evaluate;
mod export;
pub mod gradsuite;
mod metrics;
mod persist;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{Profile, RunConfig};
pub use evaluate::{evaluate, EvalReport, LeadErrors, PredictionRow};
pub use export::export_latents;
pub use metrics::{mae, persistence_baseline, relative_growth, skill};
pub use persist::{frozen_fingerprint, load_stage1, load_stage2, stage1_checkpoint, stage2_checkpoint};
pub use train::{evaluate_stage1, fit_norm, pretrain, train_forecast, Stage1, Stage1Data, Stage1Epoch, Stage1Eval, Stage2, Stage2Epoch};

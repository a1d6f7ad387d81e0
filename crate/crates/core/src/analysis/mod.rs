//! Cost accounting, metrics, gradient checks, training, checkpoints and
//! configuration.

mod checkpoint;
mod config;
mod cost;
mod gradcheck;
mod metrics;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, LogRecord, CHECKPOINT_VERSION};
pub use config::{ConfigError, TrainConfig, KEYS as CONFIG_KEYS};
pub use cost::{
    count_params_flops, count_params_flops_with, max_rf, path_rf, receptive_fields, CostReport, RfPath,
};
pub use gradcheck::{model_grad_check, sample_probes, COMPONENTS};
pub use metrics::{evaluate_mae_mse, evaluate_with, mean_confidence, true_count, Metrics, EVAL_CHUNK};
pub use train::{train_loop, EpochLog, TrainReport, Trainer};

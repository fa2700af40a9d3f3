//! Pretraining: masked cross-entropy plus the DAG regularizer, AdamW on a
//! warm-up + cosine schedule, telemetry and checkpoints.

mod checkpoint;
mod engine;
mod optim;
mod telemetry;

pub use checkpoint::{
    check_config, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint_info, save_checkpoint,
    CheckpointHeader, CheckpointInfo, FORMAT_VERSION, MAGIC,
};
pub use engine::{
    compute_gradients, evaluate, lm_cross_entropy, train_loop, EvalResult, RunningWindow, StepLog, StepStats,
    StopReason, TrainConfig, TrainReport, TrainState,
};
pub use optim::{global_norm, lr_schedule, optimizer_step, AdamState, OptimizerConfig, StepOutcome};
pub use telemetry::{Record, TelemetryConfig, TelemetrySink};

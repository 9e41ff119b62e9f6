//! End-to-end training: batch sampling, loss assembly, teacher policies,
//! checkpoints and metric logging.

pub mod checkpoint;
pub mod config;
pub mod run;
pub mod sampler;

pub use checkpoint::{load_params, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Scheme, CONFIG_SCHEMA_VERSION};
pub use run::{
    read_metrics, run_experiment, run_with_bundle, MetricPoint, OfflinePseudo, PhaseRecord, PhaseRole,
    RunMetadata, RunOptions, RunRecord, StepResult, TeacherEvent, TrainState, Trainer, ValMetrics,
    CHECKPOINT_DIR, DIAGNOSTIC_FILE, FINAL_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, OFFLINE_TEACHER_CHECKPOINT,
    RUN_FILE,
};
pub use sampler::{sample_batch, Batch, SamplerState};

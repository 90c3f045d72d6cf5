//! Run harness: configuration, checkpoints, metrics, training sessions,
//! evaluation and the variant ablation.

mod ablation;
mod checkpoint;
mod config;
mod eval;
mod metrics;
mod session;

pub use ablation::{ablate, run_variant, AblationSummary, SummaryRow, Variant, VariantResult};
pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
pub use config::{AblationSettings, RunConfig, RunSettings};
pub use eval::{evaluate, EvalReport, EvalTask};
pub use metrics::{
    append_jsonl, read_jsonl, truncate_jsonl, window_mean, write_curve_csv, MetricRecord,
};
pub use session::{
    checkpoint_policy, initial_policy, step_tasks, train, DirLock, Run, TrainOptions, TrainSummary,
    CHECKPOINT_FILE, CURVE_FILE, METRICS_FILE, SUMMARY_FILE,
};

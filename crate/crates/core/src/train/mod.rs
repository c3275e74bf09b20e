//! Metrics, optimiser and the training loops.

mod metrics;
mod optim;
mod trainer;

pub use metrics::{
    confusion_from_logits, f1_score, predict_label, Confusion, MetricsReport, F1,
    REPORT_SCHEMA_VERSION,
};
pub use optim::Sgd;
pub use trainer::{
    evaluate, load_fold_sets, parameter_hashes, train, train_hybrid, train_hybrid_on, train_stage,
    EpochRecord, FreezeAudit, HybridOutcome, MetricsLog, Split, StopReason, TrainConfig,
    TrainOutcome, METRICS_LOG_HEADER,
};

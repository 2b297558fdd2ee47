//! Optimization, the training loop, metrics and experiment orchestration.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use config::{Precision, StyleEmbedding, Toggles, TrainConfig};
pub use evaluate::{evaluate, predict_set, write_report, DomainMetrics, DomainRole, MetricsReport};
pub use experiment::{
    ablate, component_rows, resolve_normalization, train_and_evaluate, AblationConfig,
    AblationReport, AblationRow, RunOutput,
};
pub use metrics::{macro_auc, paired_t_test, roc_auc, stratified_kfold, FoldAssignment, TTest};
pub use optim::{
    adam_step, adam_update, ema_decay_at, ema_update, Adam, AdamConfig, AdamMoments,
    GradAccumulator,
};
pub use trainer::{MicroBatch, MicroResult, StepLog, StepObjective, Trainer};

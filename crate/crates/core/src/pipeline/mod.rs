//! Training and evaluation stages, composed into the supervised diagnostics
//! and the two-stage debiasing pipeline.
//!
//! Stage 1 pretrains a biased encoder (contrastive loss plus rank penalty)
//! and a main encoder (contrastive loss only) on inputs alone. Stage 2
//! mines an error set with a linear probe on the frozen biased encoder and
//! trains the main classifier with those samples upweighted.

mod config;
mod experiments;
mod metrics;
mod sweep;
mod train;

pub use config::{DatasetSpec, ExperimentConfig, ProbeConfig, SemisupConfig};
pub use experiments::{
    rank_trajectory, run_ablation, run_defund, run_erm, run_semisup, AblationOutcome,
    DefundOutcome, ErmOutcome, SemisupOutcome, TrajectoryRow,
};
pub use metrics::{bias_metric, error_set_quality, evaluate, GroupAccuracy, MetricsReport};
pub use sweep::{
    config_hash, run_sweep, select, write_sweep_csv, ExperimentKind, Selection, SweepRow,
    SweepSpec, SWEEP_COLUMNS,
};
pub use train::{
    debiased_linear_eval, erm_train, finetune_semisup, fit_linear_head, identify_error_set,
    pretrain_biased, pretrain_main, pretrain_with_log, EpochRecord, ErrorSet, Model, Pretrained, TrainLog,
};

//! Training, evaluation, sweeps, ablations and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod tables;
pub mod train;

pub use checkpoint::{
    load_checkpoint, read_meta, save_checkpoint, Checkpoint, CheckpointMeta, RngState, FORMAT_VERSION,
};
pub use config::{AucScores, TrainConfig};
pub use eval::{
    evaluate, report_from_scores, score_prepared, score_records, stage_auc, stage_auc_records, sweep_scored,
    sweep_threshold, trajectories, EvalReport, ScoredSubject, Trajectory,
};
pub use metrics::{auc_cost_ratio, binary_auc, macro_metrics, ClassMetrics, MacroMetrics};
pub use train::{ablate, test_subjects, train, AblationResult, EpochReport, TrainOutcome};

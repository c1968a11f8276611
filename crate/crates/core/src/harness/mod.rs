//! Experiment orchestration: configuration, the staged pipeline, metrics
//! and report files.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{parse_fraction, Cell, ExperimentConfig, SEED_ENV};
pub use metrics::{asr, auroc, auroc_sweep, mean_sd, roc_curve, spearman, Scenario};
pub use pipeline::{run_experiment, Autoencoders, CellSets, CleanAccuracy, Pipeline, TrainedFewShot};
pub use report::{report_read, report_write, AsrRow, AurocRow, EvalReport, ScoreRow, SelfSimRow, Summary};

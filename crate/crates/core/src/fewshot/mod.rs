//! Few-shot classifiers: a shared encoder with a prototypical or relation head.

pub mod checkpoint;
pub mod model;
pub mod train;

pub use checkpoint::{load_fewshot, save_fewshot};
pub use model::{class_means, proto_logits, EpisodeGrads, FewShotModel, HeadKind, Role, Want};
pub use train::{
    eval_accuracy, mean_ci95, train_fewshot, AccuracyReport, EpisodeClassifier, EvalConfig, TrainConfig, TrainLog,
};

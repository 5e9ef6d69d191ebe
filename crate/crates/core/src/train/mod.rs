//! Training, evaluation, cross-validation and synthetic data.

pub mod ablation;
pub mod data;
pub mod early_stop;
pub mod loso;
pub mod metrics;
pub mod synth;
pub mod trainer;

pub use data::{DataOptions, Dataset};
pub use metrics::{wa_ua, ConfusionMatrix};
pub use trainer::{evaluate, train_fold, TrainConfig, TrainHistory};

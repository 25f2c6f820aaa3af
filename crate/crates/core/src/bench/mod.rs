//! Synthetic benchmark: a procedurally generated colour-and-pattern world,
//! contrastive pretraining to get a usable starting model, the fine-tuning
//! loop with layer/class skipping toggles, and base/new evaluation.

mod pretrain;
mod probe;
mod train;
mod world;

pub use pretrain::{pretrain, Adam, PretrainConfig, PretrainLog};
pub use probe::{cost_grid, fs_profile, gd_records, probe_samples, CostPoint};
pub use train::{
    class_tokens, evaluate, evaluate_both, harmonic_mean, rank_training_samples, tune, Accuracy, EpochLog, RunReport,
    TrainConfig, BASE_LR,
};

pub use world::{
    generate_task, generate_task_with, render, world_class_name, world_image, Sample, Split, SyntheticTask,
    DEFAULT_TEST_SHOTS, GRID, WORLD_CLASSES,
};

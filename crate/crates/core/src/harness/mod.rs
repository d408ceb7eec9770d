//! Synthetic data, training, distillation and ablation.

pub mod ablate;
pub mod config;
pub mod data;
pub mod metrics;
pub mod report;
pub mod train;

pub use ablate::{ablate, write_ablation_csv, AblationRun};
pub use config::{DistillConfig, OptimizerKind, Pairing, Seeds, TrainSettings};
pub use data::{gen_dataset, Dataset, DatasetSpec, Sample, Shape};
pub use metrics::{metrics, Metrics};
pub use train::{
    check_shapes, distill, evaluate, pretrain_teacher, train_classifier, DistillOutcome, EpochStats, RunReport,
    RunStatus,
};

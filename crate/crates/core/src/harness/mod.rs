//! Configuration, data, training, evaluation, reporting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod model;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{DataConfig, DataFormat, EvalProtocol, ExperimentConfig, OptimConfig};
pub use data::{ingest, subsample, Dataset, Sample};
pub use evaluate::{evaluate, Accuracy};
pub use model::{ModelAccount, ModelSpec, Network};
pub use report::{mean_std, summarize, ReportRow};
pub use train::{train, MetricsRecord, RunSummary, TrainOptions, Trainer};

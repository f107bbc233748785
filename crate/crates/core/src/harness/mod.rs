//! Synthetic experiments: data generation, training, metrics, paired
//! comparisons and the command-line front end.

pub mod cli;
pub mod compare;
pub mod config;
pub mod data;
pub mod metrics;
pub mod train;
pub mod verify;

pub use compare::{compare, Comparison, ComparisonSummary};
pub use config::{load_config, parse_config, ExperimentConfig, Loss, TrainConfig};
pub use data::{generate, Dataset, DatasetSpec, DenoisePair, Samples, Task, ThinLineSample};
pub use metrics::{mean_psnr, psnr, segmentation_metrics, Bucket, SegmentationMetrics};
pub use train::{
    eval_denoise, eval_segmentation, evaluate, predict_all, run_experiment, train, DenoiseMetrics, EpochLog,
    EvalMetrics, Experiment, MetricsReport, Timing,
};

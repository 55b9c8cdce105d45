//! Pipeline orchestration: configuration, persistence, metrics and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod storage;

pub use config::PipelineConfig;
pub use metrics::{
    match_predictions, motion_rmse, n_error_accuracy, object_rmse, MetricsReport, PredictionRecord,
};
pub use pipeline::{run_pipeline, MaskSource, Noise};

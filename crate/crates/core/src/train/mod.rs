//! Normalization, windowing, the training loop and evaluation metrics.

mod adam;
mod dataset;
mod metrics;
mod normalize;
mod trainer;
mod windows;

pub use adam::Adam;
pub use dataset::{Dataset, Sample, Split};
pub use metrics::{evaluate, EvalMode, MetricReport, GRID_MIN_FLOW, MAPE_MIN_ABS};
pub use normalize::{Normalizer, STD_FLOOR};
pub use trainer::{
    epoch_means, evaluate_split, last_value_baseline, metrics_csv, predict_windows, train, train_with_progress,
    RunConfig, StepRecord, TrainConfig, TrainOutcome,
};
pub use windows::{make_windows, steps, window_starts, SplitSpec};

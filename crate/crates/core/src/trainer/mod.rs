//! The training loop: initialization, per-step gradient assembly and
//! updates, schedules, fitting and evaluation.

mod config;
mod fit;
mod step;

pub use config::{lr_at, LearningRates, Phase, Schedule, TrainConfig};
pub use fit::{
    evaluate, fit, metrics_csv, EvalMode, FitOutcome, MetricsRow, Start, METRICS_HEADER,
};
pub use step::{init_params, predictions, train_step, OptimizerState, StepStats};

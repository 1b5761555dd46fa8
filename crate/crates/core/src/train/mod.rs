//! Optimization, checkpoints, evaluation and robustness studies.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::{Checkpoint, TrainState};
pub use config::TrainConfig;
pub use optim::Adam;
pub use trainer::{
    ablation_run, arch_for, evaluate, gain_summary, mean_gain, reconstruction_drift,
    robustness_sweep, AblationRow, EpochMetrics, EvalRecord, GainSummary, TrainOutcome, Trainer,
};
